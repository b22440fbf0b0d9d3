"""Synthetic cohort generation and the flat visit-table interchange format.

Patients start at the untreated steady state of their own two-pool
parameters (drawn with a chosen coefficient of variation around the base
values), are seen quarterly, and initiate treatment at random with a
probability driven by the CD4 count observed at the visit. Treatment is
absorbing. A counterfactual never-treated trajectory is integrated in
parallel and observed with the same noise draws, giving the cohort its own
ground-truth causal effect.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ode
from ._kernels import adams_endpoint
from .errors import (BenchmarkUndefinedError, EquilibriumError,
                     IntegrationError, SchemaError)

YEAR_DAYS = 365.25


@dataclass
class Observation:
    """One visit record."""

    visit_index: int
    time_years: float
    cd4: float
    log10_vl: float
    below_detection: bool
    treated: bool


@dataclass
class PatientRecord:
    """Longitudinal data for one subject (plus simulation-only extras)."""

    id: str
    observations: list[Observation]
    params: ode.AdamsParams | None = None
    treatment_start_time: float | None = None
    counterfactual_cd4: list[float] | None = None

    def times(self) -> np.ndarray:
        return np.array([o.time_years for o in self.observations])

    def cd4(self) -> np.ndarray:
        return np.array([o.cd4 for o in self.observations])

    def log10_vl(self) -> np.ndarray:
        return np.array([o.log10_vl for o in self.observations])

    def treated_flags(self) -> np.ndarray:
        return np.array([o.treated for o in self.observations], dtype=bool)

    def below_flags(self) -> np.ndarray:
        return np.array([o.below_detection for o in self.observations], dtype=bool)

    def validate(self):
        t = self.times()
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise SchemaError(f"patient {self.id}: visit times not increasing")
        a = self.treated_flags().astype(int)
        if np.any(np.diff(a) < 0):
            raise SchemaError(f"patient {self.id}: treatment flag not monotone")
        if (self.counterfactual_cd4 is not None
                and len(self.counterfactual_cd4) != len(self.observations)):
            raise SchemaError(f"patient {self.id}: counterfactual length mismatch")


@dataclass
class Cohort:
    patients: list[PatientRecord]
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.patients)

    def has_counterfactual(self) -> bool:
        return bool(self.patients) and all(
            p.counterfactual_cd4 is not None for p in self.patients)


@dataclass(frozen=True)
class TreatmentPolicy:
    """Per-visit initiation probabilities by observed CD4 band.

    probabilities = (below, middle, above) for CD4 < thresholds[0],
    thresholds[0] <= CD4 <= thresholds[1] (closed interval), and
    CD4 > thresholds[1].
    """

    thresholds: tuple[float, float] = (200.0, 400.0)
    probabilities: tuple[float, float, float] = (0.47, 0.28, 0.02)

    def __post_init__(self):
        lo, hi = self.thresholds
        if not lo < hi:
            raise ValueError("thresholds must be increasing")
        for p in self.probabilities:
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    def probability(self, observed_cd4: float) -> float:
        if observed_cd4 < self.thresholds[0]:
            return self.probabilities[0]
        if observed_cd4 <= self.thresholds[1]:
            return self.probabilities[1]
        return self.probabilities[2]


@dataclass(frozen=True)
class SimConfig:
    """Simulation knobs.

    lambda_scale globally rescales the two production rates and
    infectivity_scale rescales k_1; both calibrate the cohort's steady-state
    baselines to published cohort statistics and are recorded in run
    metadata. baseline_cd4_band controls the random effects by redrawing
    patients whose untreated steady-state CD4 (cells/uL) falls outside it;
    None disables the control.
    """

    n_patients: int = 200
    visit_interval_years: float = 0.25
    horizon_years: float = 7.0
    sigma_cd4: float = 0.1
    sigma_vl: float = 0.6
    detection_limit: float = 50.0
    cv_random_effects: float = 0.5
    cv_efficacy: float | None = None
    seed: int = 0
    lambda_scale: float = 2.2
    infectivity_scale: float = 0.30
    baseline_cd4_band: tuple[float, float] | None = (160.0, 780.0)
    baseline_vl_min: float | None = 2.7

    def __post_init__(self):
        if self.n_patients < 0 or self.visit_interval_years <= 0:
            raise ValueError("bad simulation size parameters")
        if self.sigma_cd4 < 0 or self.sigma_vl < 0 or self.cv_random_effects < 0:
            raise ValueError("scales must be nonnegative")


def _logit(p):
    return math.log(p / (1.0 - p))


def _expit(x):
    return 1.0 / (1.0 + math.exp(-x))


def draw_patient_params(base: ode.AdamsParams, cv: float, rng,
                        cv_efficacy: float | None = None) -> ode.AdamsParams:
    """Draw individual parameters around ``base`` with coefficient of variation cv.

    Positive rates are log-normal with mean equal to the base value;
    efficacies are perturbed on the logit scale with a delta-method sd that
    matches the efficacy cv on the natural scale, then clamped to [0, 1].
    cv_efficacy defaults to cv.
    """
    if cv < 0:
        raise ValueError("cv must be nonnegative")
    cv_eff = cv if cv_efficacy is None else cv_efficacy
    names = list(base.__dataclass_fields__)
    z = rng.standard_normal(len(names))
    sig2 = math.log1p(cv * cv)
    sig = math.sqrt(sig2)
    out = {}
    for name, zi in zip(names, z):
        v = getattr(base, name)
        if name in ode.AdamsParams._EFFICACY_FIELDS:
            if 0.0 < v < 1.0 and cv_eff > 0:
                sd_logit = cv_eff / (1.0 - v)
                v = _expit(_logit(v) + sd_logit * zi)
            out[name] = min(1.0, max(0.0, v))
        else:
            out[name] = v * math.exp(sig * zi - sig2 / 2.0)
    return ode.AdamsParams(**out)


def assign_treatment(observed_cd4: float, already_treated: bool,
                     policy: TreatmentPolicy, rng) -> bool:
    """One initiation decision; treatment is absorbing."""
    if observed_cd4 < 0:
        raise ValueError("observed_cd4 must be nonnegative")
    if already_treated:
        return True
    return bool(rng.uniform() < policy.probability(observed_cd4))


def _observe_with_noise(true_state, config: SimConfig, eps_cd4: float,
                        eps_vl: float) -> tuple[float, float, bool]:
    """Apply the observation model with given noise draws (shared for CRN)."""
    y = np.asarray(true_state, dtype=float)
    if y.shape == (6,):
        total = float(y[0] + y[1] + y[2] + y[3]) / 1000.0  # per mL -> per uL
        copies = float(y[4])                               # virions/mL
    elif y.shape == (4,):
        total = float(y[0] + y[1] + y[2])                  # already per uL
        copies = float(y[3]) * 1000.0
    else:
        raise ValueError("state must have 4 or 6 components")
    root = max(0.0, total ** 0.25 + eps_cd4)
    cd4 = root ** 4
    log_vl = math.log10(max(copies, 1e-300)) + eps_vl
    below = config.detection_limit > 0 and 10.0 ** log_vl < config.detection_limit
    if below:
        log_vl = math.log10(config.detection_limit)
    return cd4, log_vl, below


def observe(true_state, config: SimConfig, rng) -> tuple[float, float, bool]:
    """Noisy (cd4, log10_vl, below_detection) for a latent state.

    CD4 noise is additive on the 4th-root scale; viral load noise on the
    log10 scale, floored at the detection limit.
    """
    eps_cd4 = rng.standard_normal() * config.sigma_cd4
    eps_vl = rng.standard_normal() * config.sigma_vl
    return _observe_with_noise(true_state, config, eps_cd4, eps_vl)


def scaled_base_params(base: ode.AdamsParams, config: SimConfig) -> ode.AdamsParams:
    if config.lambda_scale == 1.0 and config.infectivity_scale == 1.0:
        return base
    return replace(base, lambda_1=base.lambda_1 * config.lambda_scale,
                   lambda_2=base.lambda_2 * config.lambda_scale,
                   k_1=base.k_1 * config.infectivity_scale)


def simulate_patient(params: ode.AdamsParams, policy: TreatmentPolicy,
                     config: SimConfig, rng, patient_id: str = "0",
                     equilibrium=None) -> PatientRecord:
    """Simulate one patient with a coupled counterfactual never-treated arm."""
    try:
        eq = (equilibrium if equilibrium is not None
              else ode.untreated_equilibrium_adams(params))
    except (IntegrationError, EquilibriumError) as exc:
        raise IntegrationError(f"patient {patient_id}: {exc}") from exc
    p_arr = params.rate_array()
    n_visits = int(round(config.horizon_years / config.visit_interval_years)) + 1
    state = eq.copy()
    state_cf = eq.copy()
    treated = False
    start_time = None
    observations = []
    cf_cd4 = []
    for k in range(n_visits):
        t_years = k * config.visit_interval_years
        eps_cd4 = rng.standard_normal() * config.sigma_cd4
        eps_vl = rng.standard_normal() * config.sigma_vl
        cd4, log_vl, below = _observe_with_noise(state, config, eps_cd4, eps_vl)
        cf_obs, _, _ = _observe_with_noise(state_cf, config, eps_cd4, eps_vl)
        if not treated:
            treated = assign_treatment(cd4, False, policy, rng)
            if treated:
                start_time = t_years
        observations.append(Observation(k, t_years, cd4, log_vl, below, treated))
        cf_cd4.append(cf_obs)
        if k < n_visits - 1:
            t0 = t_years * YEAR_DAYS
            t1 = (t_years + config.visit_interval_years) * YEAR_DAYS
            state, ok = adams_endpoint(p_arr, state, t0, t1, treated, 1e-7, 1e-6)
            if not ok:
                raise IntegrationError(
                    f"patient {patient_id}: integration failed on [{t0:g}, {t1:g}] days")
            if treated:
                state_cf, ok = adams_endpoint(p_arr, state_cf, t0, t1, False,
                                              1e-7, 1e-6)
                if not ok:
                    raise IntegrationError(
                        f"patient {patient_id}: counterfactual integration failed")
            else:
                state_cf = state.copy()
    return PatientRecord(id=patient_id, observations=observations, params=params,
                         treatment_start_time=start_time, counterfactual_cd4=cf_cd4)


def _draw_controlled(base: ode.AdamsParams, config: SimConfig, rng):
    """Draw parameters, redrawing until the untreated steady state is plausible.

    Draws whose steady-state CD4 falls outside baseline_cd4_band or whose
    steady-state viral load is below baseline_vl_min (an uninfectable
    parameter draw) are rejected and redrawn from the same stream, as are
    non-settling pathological draws.
    """
    band = config.baseline_cd4_band
    vl_min = config.baseline_vl_min
    controlled = band is not None or vl_min is not None
    last_exc = None
    for _ in range(500):
        params = draw_patient_params(base, config.cv_random_effects, rng,
                                     cv_efficacy=config.cv_efficacy)
        try:
            eq = ode.untreated_equilibrium_adams(params)
        except (IntegrationError, EquilibriumError) as exc:
            if not controlled:
                raise
            last_exc = exc
            continue
        if not controlled:
            return params, eq
        cd4 = float(eq[0] + eq[1] + eq[2] + eq[3]) / 1000.0
        log_vl = math.log10(max(float(eq[4]), 1e-300))
        if band is not None and not (band[0] <= cd4 <= band[1]):
            continue
        if vl_min is not None and log_vl < vl_min:
            continue
        return params, eq
    raise IntegrationError(
        f"no acceptable parameter draw in 500 attempts (last issue: {last_exc})")


def simulate_cohort(config: SimConfig, base: ode.AdamsParams = ode.ADAMS_BASE,
                    policy: TreatmentPolicy = TreatmentPolicy()) -> Cohort:
    """Simulate n independent patients with per-patient child RNG streams."""
    base = scaled_base_params(base, config)
    patients = []
    for pid in range(config.n_patients):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, pid]))
        params, eq = _draw_controlled(base, config, rng)
        patients.append(simulate_patient(params, policy, config, rng,
                                         patient_id=str(pid), equilibrium=eq))
    meta = {"seed": config.seed, "n_patients": config.n_patients,
            "lambda_scale": config.lambda_scale,
            "infectivity_scale": config.infectivity_scale,
            "baseline_cd4_band": list(config.baseline_cd4_band)
            if config.baseline_cd4_band else None}
    return Cohort(patients=patients, metadata=meta)


def benchmark_causal_effect(cohort: Cohort) -> tuple[float, float, float]:
    """Mean observed-minus-counterfactual CD4 among initiators.

    Returns the mean difference at 1 year and 2 years after each patient's
    initiation visit and at the final horizon visit. Patients lacking a
    visit in a window are skipped for that window.
    """
    if not cohort.has_counterfactual():
        raise BenchmarkUndefinedError(
            "benchmark undefined: cohort carries no counterfactual trajectories")
    diffs = {1.0: [], 2.0: [], math.inf: []}
    any_treated = False
    for pat in cohort.patients:
        if pat.treatment_start_time is None:
            continue
        any_treated = True
        t = pat.times()
        cd4 = pat.cd4()
        cf = np.asarray(pat.counterfactual_cd4)
        for horizon in (1.0, 2.0):
            target = pat.treatment_start_time + horizon
            idx = np.nonzero(np.abs(t - target) < 1e-9)[0]
            if idx.size:
                diffs[horizon].append(cd4[idx[0]] - cf[idx[0]])
        diffs[math.inf].append(cd4[-1] - cf[-1])
    if not any_treated:
        raise BenchmarkUndefinedError("benchmark undefined: no treated patients")
    return (float(np.mean(diffs[1.0])) if diffs[1.0] else math.nan,
            float(np.mean(diffs[2.0])) if diffs[2.0] else math.nan,
            float(np.mean(diffs[math.inf])))


# ---------------------------------------------------------------------------
# Flat visit-table serialization (also the real-data ingestion format)
# ---------------------------------------------------------------------------

_REQUIRED_COLUMNS = ["patient_id", "visit_index", "time_years", "cd4",
                     "log10_vl", "below_detection", "treated"]
_CF_COLUMN = "counterfactual_cd4"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_cohort_csv(cohort: Cohort, path) -> None:
    """Write one row per visit; counterfactual column included when present."""
    with_cf = cohort.has_counterfactual()
    header = _REQUIRED_COLUMNS + ([_CF_COLUMN] if with_cf else [])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for pat in cohort.patients:
            for j, obs in enumerate(pat.observations):
                row = [pat.id, obs.visit_index, _fmt(obs.time_years),
                       _fmt(obs.cd4), _fmt(obs.log10_vl),
                       int(obs.below_detection), int(obs.treated)]
                if with_cf:
                    row.append(_fmt(pat.counterfactual_cd4[j]))
                wr.writerow(row)


def _parse_bool(raw: str, row_no: int, col: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "t", "yes"):
        return True
    if v in ("0", "false", "f", "no"):
        return False
    raise SchemaError(f"row {row_no}: column '{col}' is not a boolean: {raw!r}")


def _parse_float(raw: str, row_no: int, col: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise SchemaError(f"row {row_no}: column '{col}' is not numeric: {raw!r}")


def read_cohort_csv(path, drop_missing_rows: bool = False,
                    min_visits: int = 1) -> tuple[Cohort, dict]:
    """Parse a visit table; returns (cohort, ingestion stats).

    With drop_missing_rows, rows with an empty cd4 or log10_vl are dropped
    and patients left with fewer than ``min_visits`` visits are excluded
    (counts reported in the stats dict). Otherwise missing values are schema
    errors.
    """
    stats = {"rows_dropped": 0, "patients_excluded": 0, "rows_kept": 0}
    per_patient: dict[str, list] = {}
    cf_values: dict[str, list] = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        try:
            header = next(rd)
        except StopIteration:
            raise SchemaError("empty file: header row is mandatory")
        header = [h.strip() for h in header]
        missing = [c for c in _REQUIRED_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"missing required column(s): {', '.join(missing)}")
        col = {name: header.index(name) for name in header}
        has_cf = _CF_COLUMN in col
        for row_no, row in enumerate(rd, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"row {row_no}: expected {len(header)} fields, "
                                  f"got {len(row)}")
            pid = row[col["patient_id"]].strip()
            if not pid:
                raise SchemaError(f"row {row_no}: column 'patient_id' is empty")
            raw_cd4 = row[col["cd4"]].strip()
            raw_vl = row[col["log10_vl"]].strip()
            if not raw_cd4 or not raw_vl:
                if drop_missing_rows:
                    stats["rows_dropped"] += 1
                    per_patient.setdefault(pid, [])
                    continue
                missing_col = "cd4" if not raw_cd4 else "log10_vl"
                raise SchemaError(f"row {row_no}: column '{missing_col}' is empty")
            obs = Observation(
                visit_index=int(_parse_float(row[col["visit_index"]], row_no,
                                             "visit_index")),
                time_years=_parse_float(row[col["time_years"]], row_no, "time_years"),
                cd4=_parse_float(raw_cd4, row_no, "cd4"),
                log10_vl=_parse_float(raw_vl, row_no, "log10_vl"),
                below_detection=_parse_bool(row[col["below_detection"]], row_no,
                                            "below_detection"),
                treated=_parse_bool(row[col["treated"]], row_no, "treated"),
            )
            if obs.cd4 < 0:
                raise SchemaError(f"row {row_no}: column 'cd4' is negative")
            per_patient.setdefault(pid, []).append((row_no, obs))
            if has_cf:
                raw_cf = row[col[_CF_COLUMN]].strip()
                cf_values.setdefault(pid, []).append(
                    _parse_float(raw_cf, row_no, _CF_COLUMN) if raw_cf else math.nan)
    patients = []
    for pid, rows in per_patient.items():
        if len(rows) < max(min_visits, 1):
            stats["patients_excluded"] += 1
            continue
        observations = [obs for _, obs in rows]
        start = None
        for obs in observations:
            if obs.treated:
                start = obs.time_years
                break
        cf = None
        if has_cf:
            vals = cf_values.get(pid, [])
            if len(vals) == len(rows) and not any(math.isnan(v) for v in vals):
                cf = vals
        pat = PatientRecord(id=pid, observations=observations,
                            treatment_start_time=start, counterfactual_cd4=cf)
        pat.validate()
        stats["rows_kept"] += len(observations)
        patients.append(pat)
    return Cohort(patients=patients), stats

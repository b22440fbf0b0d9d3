"""Naive and IPT-weighted GEE estimators for the CD4 outcome (Models 1-3).

Model 1 regresses CD4 on cumulative treatment time with a one-year knee.
Models 2 and 3 add visit time and baseline CD4 and weight each person-visit
by a stabilized inverse-probability-of-treatment weight built from pooled
logistic initiation models; Model 3's treatment model adds viral-load
covariates. All outcome fits use an identity working correlation with a
clustered (by patient) sandwich covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort, PatientRecord
from .errors import PositivityError, RankDeficientError, SeparationError

CD4_CLASS_EDGES = (200.0, 400.0)
VL_COPY_EDGES = (401.0, 10000.0)


@dataclass
class DesignMatrix:
    """Rows of covariates with labeled columns and a per-row cluster id."""

    x: np.ndarray
    columns: list[str]
    cluster_id: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.cluster_id = np.asarray(self.cluster_id)
        if self.x.ndim != 2 or self.x.shape[1] != len(self.columns):
            raise ValueError("design shape does not match column labels")
        if self.x.shape[0] != self.cluster_id.shape[0]:
            raise ValueError("cluster_id length does not match rows")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("non-finite design entries")


@dataclass
class GeeFit:
    coefficients: np.ndarray
    covariance: np.ndarray
    columns: list[str]
    n_clusters: int
    converged: bool = True
    weight_mean: float | None = None
    weight_max: float | None = None

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.columns.index(name)])

    def se(self, name: str) -> float:
        i = self.columns.index(name)
        return math.sqrt(max(self.covariance[i, i], 0.0))

    def z(self, name: str) -> float:
        return self.coef(name) / self.se(name)

    def linear_combo(self, weights: dict[str, float]) -> tuple[float, float]:
        """Estimate and SE of a linear combination of coefficients."""
        v = np.zeros(len(self.columns))
        for name, w in weights.items():
            v[self.columns.index(name)] = w
        est = float(v @ self.coefficients)
        se = math.sqrt(max(float(v @ self.covariance @ v), 0.0))
        return est, se


def build_cumulative_features(patient: PatientRecord) -> np.ndarray:
    """Per-visit (cum, cumlag) in years.

    cum at visit t is the treated time accumulated through visit t-1:
    sum over k in 1..t-1 of A_k * (t_k - t_{k-1}); cumlag = max(0, cum - 1).
    Treatment before the first visit counts as absent.
    """
    t = patient.times()
    a = patient.treated_flags().astype(float)
    n = t.size
    out = np.zeros((n, 2))
    cum = 0.0
    for k in range(1, n):
        if k >= 2:
            cum += a[k - 1] * (t[k - 1] - t[k - 2])
        out[k, 0] = cum
        out[k, 1] = max(0.0, cum - 1.0)
    return out


def fit_logistic(design: DesignMatrix, response) -> tuple[np.ndarray, np.ndarray]:
    """Maximum-likelihood logistic regression by IRLS.

    Converges when the largest score component falls below 1e-8; any
    coefficient escaping past 30 raises SeparationError. Returns
    (coefficients, inverse observed information).
    """
    x = design.x
    y = np.asarray(response, dtype=float)
    if set(np.unique(y)) - {0.0, 1.0}:
        raise ValueError("response must be binary")
    n, p = x.shape
    beta = np.zeros(p)
    for _ in range(100):
        eta = x @ beta
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = mu * (1.0 - mu)
        score = x.T @ (y - mu)
        if np.max(np.abs(score)) < 1e-8:
            break
        info = x.T @ (w[:, None] * x)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise RankDeficientError(
                f"rank-deficient design: {_offending_column(x, design.columns)}",
                column=_offending_column(x, design.columns))
        beta = beta + step
        if np.max(np.abs(beta)) > 30.0:
            raise SeparationError("separation detected")
    else:
        raise SeparationError("separation detected")
    mu = 1.0 / (1.0 + np.exp(-(x @ beta)))
    w = mu * (1.0 - mu)
    cov = np.linalg.inv(x.T @ (w[:, None] * x))
    return beta, cov


def _offending_column(x, columns):
    """First column whose addition does not increase the rank."""
    for j in range(1, x.shape[1] + 1):
        if np.linalg.matrix_rank(x[:, :j]) < j:
            return columns[j - 1]
    return columns[-1]


def fit_gee(design: DesignMatrix, response, weights=None) -> GeeFit:
    """Weighted least squares with clustered sandwich covariance.

    Identity working correlation: the point estimate solves the weighted
    normal equations; the covariance is B^-1 M B^-1 with per-cluster score
    outer products in M.
    """
    x = design.x
    y = np.asarray(response, dtype=float)
    w = np.ones(x.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    xw = x * w[:, None]
    b_mat = x.T @ xw
    try:
        beta = np.linalg.solve(b_mat, xw.T @ y)
        if np.linalg.cond(b_mat) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        col = _offending_column(x * np.sqrt(w[:, None]), design.columns)
        raise RankDeficientError(f"rank-deficient design: {col}", column=col)
    resid = y - x @ beta
    score_rows = xw * resid[:, None]
    # per-cluster score sums
    order = np.argsort(design.cluster_id, kind="stable")
    cid = design.cluster_id[order]
    rows = score_rows[order]
    boundaries = np.nonzero(np.r_[True, cid[1:] != cid[:-1]])[0]
    cluster_scores = np.add.reduceat(rows, boundaries, axis=0)
    m_mat = cluster_scores.T @ cluster_scores
    b_inv = np.linalg.inv(b_mat)
    cov = b_inv @ m_mat @ b_inv
    return GeeFit(coefficients=beta, covariance=cov, columns=list(design.columns),
                  n_clusters=len(boundaries))


# ---------------------------------------------------------------------------
# Treatment models and stabilized weights
# ---------------------------------------------------------------------------

def _cd4_class_features(cd4: float) -> tuple[float, float]:
    """Dummies for CD4 < 200 and 200 <= CD4 <= 400 (reference > 400)."""
    if cd4 < CD4_CLASS_EDGES[0]:
        return 1.0, 0.0
    if cd4 <= CD4_CLASS_EDGES[1]:
        return 0.0, 1.0
    return 0.0, 0.0


def _vl_class_features(log10_vl: float, below: bool) -> tuple[float, float, float]:
    """Dummies for copies in [401, 10000] and > 10000, plus undetectable flag."""
    copies = 10.0 ** log10_vl
    mid = 1.0 if VL_COPY_EDGES[0] <= copies <= VL_COPY_EDGES[1] else 0.0
    high = 1.0 if copies > VL_COPY_EDGES[1] else 0.0
    return mid, high, 1.0 if below else 0.0


MODEL2_NUMERATOR = ("baseline_cd4_class", "time")
MODEL2_DENOMINATOR = ("baseline_cd4_class", "cd4_class", "time")
MODEL3_DENOMINATOR = ("baseline_cd4_class", "cd4_class", "vl_class", "time")

_FEATURE_WIDTH = {"baseline_cd4_class": 2, "cd4_class": 2, "vl_class": 3,
                  "time": 1}


def _treatment_design(cohort: Cohort, covariates) -> tuple[DesignMatrix, np.ndarray, list]:
    """Initiation risk-set rows: visits k >= 1 with A_{k-1} = 0.

    The response is A_k; rows stop after (and include) the initiation visit.
    Returns (design, response, row keys (patient_index, visit_index)).
    """
    rows, resp, keys, cids = [], [], [], []
    columns = ["intercept"]
    for name in covariates:
        if name == "baseline_cd4_class":
            columns += ["base_cd4_lt200", "base_cd4_200_400"]
        elif name == "cd4_class":
            columns += ["cd4_lt200", "cd4_200_400"]
        elif name == "vl_class":
            columns += ["vl_401_10k", "vl_gt10k", "vl_undetectable"]
        elif name == "time":
            columns += ["time"]
        else:
            raise ValueError(f"unknown treatment-model covariate {name!r}")
    for pi, pat in enumerate(cohort.patients):
        obs = pat.observations
        base_cd4 = obs[0].cd4
        for k in range(1, len(obs)):
            if obs[k - 1].treated:
                break
            feats = [1.0]
            for name in covariates:
                if name == "baseline_cd4_class":
                    feats += list(_cd4_class_features(base_cd4))
                elif name == "cd4_class":
                    feats += list(_cd4_class_features(obs[k].cd4))
                elif name == "vl_class":
                    feats += list(_vl_class_features(obs[k].log10_vl,
                                                     obs[k].below_detection))
                elif name == "time":
                    feats.append(obs[k].time_years)
            rows.append(feats)
            resp.append(1.0 if obs[k].treated else 0.0)
            keys.append((pi, k))
            cids.append(pi)
    design = DesignMatrix(np.array(rows, dtype=float), columns,
                          np.array(cids))
    return design, np.array(resp), keys


def stabilized_weights(cohort: Cohort,
                       numerator_covars=MODEL2_NUMERATOR,
                       denominator_covars=MODEL2_DENOMINATOR) -> dict:
    """Per person-visit stabilized IPT weights.

    SW(t) multiplies, over visits k = 1..t still untreated at k-1, the
    ratio of numerator to denominator fitted probabilities of the observed
    decision; post-initiation factors are 1. Keys are (patient_index,
    visit_index).
    """
    num_design, resp, keys = _treatment_design(cohort, numerator_covars)
    den_design, resp_d, keys_d = _treatment_design(cohort, denominator_covars)
    if keys != keys_d or not np.array_equal(resp, resp_d):
        raise RuntimeError("risk sets differ between numerator and denominator")
    beta_n, _ = fit_logistic(num_design, resp)
    beta_d, _ = fit_logistic(den_design, resp_d)
    p_num = 1.0 / (1.0 + np.exp(-(num_design.x @ beta_n)))
    p_den = 1.0 / (1.0 + np.exp(-(den_design.x @ beta_d)))
    factor_by_key = {}
    for (key, a, pn, pd) in zip(keys, resp, p_num, p_den):
        pn_obs = pn if a == 1.0 else 1.0 - pn
        pd_obs = pd if a == 1.0 else 1.0 - pd
        if pd_obs < 1e-6:
            pat = cohort.patients[key[0]]
            raise PositivityError(
                f"positivity violation: patient {pat.id} visit {key[1]} "
                f"denominator probability {pd_obs:.3e}")
        factor_by_key[key] = pn_obs / pd_obs
    weights = {}
    for pi, pat in enumerate(cohort.patients):
        sw = 1.0
        for k in range(len(pat.observations)):
            if k >= 1:
                sw *= factor_by_key.get((pi, k), 1.0)
            weights[(pi, k)] = sw
    return weights


def _outcome_design(cohort: Cohort, with_time_baseline: bool):
    rows, resp, cids, keys = [], [], [], []
    columns = ["intercept", "cum", "cumlag"]
    if with_time_baseline:
        columns += ["time", "baseline_cd4"]
    for pi, pat in enumerate(cohort.patients):
        feats = build_cumulative_features(pat)
        base_cd4 = pat.observations[0].cd4
        for k, obs in enumerate(pat.observations):
            row = [1.0, feats[k, 0], feats[k, 1]]
            if with_time_baseline:
                row += [obs.time_years, base_cd4]
            rows.append(row)
            resp.append(obs.cd4)
            cids.append(pi)
            keys.append((pi, k))
    return (DesignMatrix(np.array(rows), columns, np.array(cids)),
            np.array(resp), keys)


def _fit_weighted_model(cohort: Cohort, numerator, denominator) -> GeeFit:
    design, resp, keys = _outcome_design(cohort, with_time_baseline=True)
    weights = stabilized_weights(cohort, numerator, denominator)
    w = np.array([weights[k] for k in keys])
    fit = fit_gee(design, resp, w)
    fit.weight_mean = float(np.mean(w))
    fit.weight_max = float(np.max(w))
    return fit


def fit_model1(cohort: Cohort) -> GeeFit:
    """Unweighted regression of CD4 on (1, cum, cumlag)."""
    design, resp, _ = _outcome_design(cohort, with_time_baseline=False)
    return fit_gee(design, resp)


def fit_model2(cohort: Cohort) -> GeeFit:
    """IPT-weighted regression; treatment model uses CD4 classes only."""
    return _fit_weighted_model(cohort, MODEL2_NUMERATOR, MODEL2_DENOMINATOR)


def fit_model3(cohort: Cohort) -> GeeFit:
    """IPT-weighted regression; treatment model adds viral-load classes."""
    return _fit_weighted_model(cohort, MODEL2_NUMERATOR, MODEL3_DENOMINATOR)

"""Second-order-cone surrogates ``g~(X) = c.X + d - ||A X + b||`` and linear equality fits.

The boundary-aware fit minimises squared error on the near-limit band
(Omega2) while pushing Omega1 below and Omega3 above the limit through
squared hinge penalties whose weight is escalated geometrically.  A final
shift of ``d`` makes every Omega1 sample strictly rejected.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares

from .errors import (
    BandTooTightError,
    ConservativenessError,
    ParameterError,
    RepairError,
    UnfittableMetricError,
)
from .metrics import FrequencyParams
from .scenarios import ABOVE, BAND, BELOW, FeatureVector, StabilityDataset, partition

logger = logging.getLogger(__name__)

EPS_STRICT = 1e-9
RIDGE_LAMBDA = 1e-8


@dataclass(frozen=True, eq=False)
class SocSurrogate:
    metric: str
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: float
    variables: tuple
    g_lim: float
    nu: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.variables)
        A = np.asarray(self.A, dtype=float).reshape(-1, n)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(A.shape[0]))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float).reshape(n))
        object.__setattr__(self, "d", float(self.d))
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "g_lim", float(self.g_lim))

    @property
    def rows(self) -> int:
        return self.A.shape[0]

    def value(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ self.c + self.d - np.linalg.norm(X @ self.A.T + self.b, axis=1)

    def margin(self, X) -> np.ndarray:
        return self.value(X) - self.g_lim

    def accepts(self, X) -> np.ndarray:
        """``||A X + b|| <= c.X + (d - g_lim)``."""
        return self.value(X) >= self.g_lim

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "variables": list(self.variables),
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "c": self.c.tolist(),
            "d": self.d,
            "g_lim": self.g_lim,
            "nu": self.nu,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SocSurrogate":
        n = len(data["variables"])
        A = np.asarray(data["A"], dtype=float).reshape(-1, n)
        return cls(
            data["metric"], A, data["b"], data["c"], data["d"], tuple(data["variables"]),
            data["g_lim"], data.get("nu"), dict(data.get("diagnostics", {})),
        )


# -------------------------------------------------------------- fitting

def _unpack(theta: np.ndarray, j: int, n: int):
    A = theta[: j * n].reshape(j, n)
    b = theta[j * n : j * n + j]
    c = theta[j * n + j : j * n + j + n]
    return A, b, c, theta[-1]


def _cone_values(theta, X, j, n):
    A, b, c, d = _unpack(theta, j, n)
    U = X @ A.T + b
    norms = np.linalg.norm(U, axis=1)
    return X @ c + d - norms, U, norms


def _cone_jacobian(X, U, norms):
    """d g~ / d theta, one row per sample; the norm's kink gets a zero subgradient."""
    unit = np.divide(U, norms[:, None], out=np.zeros_like(U), where=norms[:, None] > 0)
    dA = -(unit[:, :, None] * X[:, None, :]).reshape(len(X), U.shape[1] * X.shape[1])
    ones = np.ones((len(X), 1))
    return np.hstack([dA, -unit, X, ones])


def _affine_ls(X, y):
    D = np.hstack([X, np.ones((len(X), 1))])
    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    return coef[:-1], coef[-1]


def initial_parameters(dataset: StabilityDataset, j: int) -> np.ndarray:
    """Identity-padded A, b = 0, (c, d) from an affine least-squares fit on Omega2."""
    n = len(dataset.variables)
    band = dataset.mask(BAND) & ~dataset.infeasible
    pool = band if band.any() else ~dataset.infeasible
    if pool.any():
        c, d = _affine_ls(dataset.X[pool], dataset.g[pool])
    else:
        c, d = np.zeros(n), dataset.limit - 1.0
    A = np.eye(j, n)
    return np.concatenate([A.ravel(), np.zeros(j), c, [d]])


def _default_margin(dataset: StabilityDataset) -> float:
    nu = dataset.nu or 0.0
    scale = max(1.0, abs(dataset.limit))
    return max(1e-4 * nu, 1e-8 * scale)


def fit_soc_boundary(
    dataset: StabilityDataset,
    j: int | None = None,
    seed: int = 0,
    *,
    mu0: float = 1.0,
    mu_growth: float = 10.0,
    mu_cap: float = 1e8,
    margin: float | None = None,
    restarts: int = 0,
    max_nfev: int = 400,
    strict: bool = True,
) -> SocSurrogate:
    """Boundary-aware SOC fit on a partitioned dataset.

    ``restarts`` adds seeded perturbations of the initial ``A``; the
    candidate with the lowest penalised objective wins.  With ``strict``
    a still-misclassified Omega1/Omega3 sample at the penalty cap raises
    :class:`BandTooTightError`.
    """
    if dataset.labels is None:
        raise ValueError("dataset must be partitioned before fitting")
    n = len(dataset.variables)
    j = n if j is None else int(j)
    if j < 1:
        raise ValueError("cone must have at least one row")
    X, g, lim = dataset.X, dataset.g, dataset.limit
    m2 = dataset.mask(BAND) & ~dataset.infeasible
    m1 = dataset.mask(BELOW)
    m3 = dataset.mask(ABOVE)
    X2, g2, X1, X3 = X[m2], g[m2], X[m1], X[m3]
    eps = _default_margin(dataset) if margin is None else float(margin)

    def residual_fns(mu, margin_):
        root = math.sqrt(mu)

        def resid(t):
            v2 = _cone_values(t, X2, j, n)[0]
            v1 = _cone_values(t, X1, j, n)[0]
            v3 = _cone_values(t, X3, j, n)[0]
            return np.concatenate(
                [g2 - v2, root * np.maximum(0.0, v1 - lim + margin_), root * np.maximum(0.0, lim + margin_ - v3)]
            )

        def jac(t):
            v2, U2, n2 = _cone_values(t, X2, j, n)
            v1, U1, n1 = _cone_values(t, X1, j, n)
            v3, U3, n3 = _cone_values(t, X3, j, n)
            J1 = _cone_jacobian(X1, U1, n1) * (root * (v1 - lim + margin_ > 0))[:, None]
            J3 = _cone_jacobian(X3, U3, n3) * (-root * (lim + margin_ - v3 > 0))[:, None]
            return np.vstack([-_cone_jacobian(X2, U2, n2), J1, J3])

        return resid, jac

    def solve(theta, mu, margin_):
        resid, jac = residual_fns(mu, margin_)
        sol = least_squares(
            resid, theta, jac=jac, method="trf", x_scale="jac", ftol=1e-14, xtol=1e-14, gtol=1e-14, max_nfev=max_nfev
        )
        return sol.x, sol.nfev

    def separates(theta) -> bool:
        return not np.any(_cone_values(theta, X1, j, n)[0] >= lim) and not np.any(
            _cone_values(theta, X3, j, n)[0] < lim
        )

    def run(theta):
        if len(X2) + len(X1) + len(X3) == 0:
            return theta, 0.0, True, mu0, 0
        mu, nfev, converged = mu0, 0, False
        while True:
            theta, used = solve(theta, mu, eps)
            nfev += used
            if separates(theta):
                converged = True
                break
            if mu * mu_growth > mu_cap * (1 + 1e-12):
                break
            mu *= mu_growth
        if converged and eps > 0:
            # the push margin can fight samples lying within eps of the limit
            polished, used = solve(theta, mu, 0.0)
            nfev += used
            if separates(polished):
                theta = polished
        objective = float(np.sum(residual_fns(mu, 0.0)[0](theta) ** 2))
        return theta, objective, converged, mu, nfev

    starts = [initial_parameters(dataset, j)]
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        t = starts[0].copy()
        t[: j * n] += 0.3 * rng.standard_normal(j * n)
        t[j * n : j * n + j] += 0.3 * rng.standard_normal(j)
        starts.append(t)
    best = None
    for t0 in starts:
        cand = run(t0)
        # converged candidates first, then lowest objective; ties keep the earlier start
        key = (not cand[2], cand[1])
        if best is None or key < best[0]:
            best = (key, cand)
    theta, objective, converged, mu, nfev = best[1]
    A, b, c, d = _unpack(theta, j, n)
    v2 = _cone_values(theta, X2, j, n)[0]
    sur = SocSurrogate(dataset.metric, A, b, c, d, dataset.variables, lim, dataset.nu)
    diag = {
        "method": "fit",
        "rows": j,
        "omega2_sse": float(np.sum((g2 - v2) ** 2)),
        "penalized_objective": objective,
        "mu_final": mu,
        "converged": converged,
        "nfev": int(nfev),
        "misclassified_omega1": int(np.sum(sur.value(X1) >= lim)) if len(X1) else 0,
        "misclassified_omega3": int(np.sum(sur.value(X3) < lim)) if len(X3) else 0,
    }
    sur = replace(sur, diagnostics=diag)
    if strict and not converged:
        raise BandTooTightError(
            f"{dataset.metric}: penalty cap {mu_cap:g} reached with "
            f"{diag['misclassified_omega1']} Omega1 / {diag['misclassified_omega3']} Omega3 misclassified; widen nu"
        )
    return sur


def repair_conservativeness(surrogate: SocSurrogate, dataset: StabilityDataset) -> SocSurrogate:
    """Lower ``d`` just enough that every Omega1 sample is strictly rejected.

    Raises :class:`RepairError` if the shift makes an Omega3 sample rejected.
    """
    if dataset.labels is None:
        dataset = partition(dataset, surrogate.g_lim, surrogate.nu or 0.0)
    m1, m3 = dataset.mask(BELOW), dataset.mask(ABOVE)
    delta = 0.0
    if m1.any():
        worst = float(np.max(surrogate.value(dataset.X[m1]) - surrogate.g_lim))
        delta = max(0.0, worst + EPS_STRICT)
    repaired = replace(
        surrogate, d=surrogate.d - delta, diagnostics={**surrogate.diagnostics, "repair_shift": delta}
    )
    if m3.any():
        bad = int(np.sum(repaired.value(dataset.X[m3]) < repaired.g_lim))
        if bad:
            raise RepairError(f"{surrogate.metric}: shift {delta:.3g} rejects {bad} Omega3 samples")
    return repaired


def default_nu0(dataset: StabilityDataset) -> float:
    """5% of the interquartile range of finite metric values, with fallbacks for flat data."""
    vals = dataset.finite_values()
    if vals.size:
        q1, q3 = np.percentile(vals, [25, 75])
        if q3 > q1:
            return 0.05 * float(q3 - q1)
        spread = float(np.ptp(vals))
        if spread > 0:
            return 0.05 * spread
    return 1e-6 * max(1.0, abs(dataset.limit))


def tune_nu(
    dataset: StabilityDataset,
    nu0: float | None = None,
    growth: float = 1.5,
    cap: float | None = None,
    *,
    max_attempts: int = 20,
    j: int | None = None,
    seed: int = 0,
    **fit_kw,
) -> tuple[SocSurrogate, float]:
    """Partition-fit-repair with ``nu = nu0 * growth**k`` until the repair succeeds.

    ``cap`` bounds ``nu`` itself, ``max_attempts`` the number of tries.
    """
    nu0 = default_nu0(dataset) if nu0 is None else float(nu0)
    if not nu0 > 0 or not growth > 1:
        raise ValueError("need nu0 > 0 and growth > 1")
    attempts = []
    nu = nu0
    for k in range(max_attempts):
        if cap is not None and nu > cap * (1 + 1e-12):
            break
        labelled = partition(dataset, dataset.limit, nu)
        sur = fit_soc_boundary(labelled, j, seed, strict=False, **fit_kw)
        try:
            sur = repair_conservativeness(sur, labelled)
        except RepairError as exc:
            attempts.append({"nu": nu, "error": str(exc)})
            logger.debug("%s: nu=%.4g failed (%s)", dataset.metric, nu, exc)
            nu *= growth
            continue
        report = verify(sur, labelled)
        report.assert_conservative()
        diag = {**sur.diagnostics, "attempts": k + 1, "nu0": nu0, "nu_growth": growth, **report.summary()}
        return replace(sur, nu=nu, diagnostics=diag), nu
    raise UnfittableMetricError(
        f"{dataset.metric}: no conservative cone found after {len(attempts)} attempts (last nu={nu / growth:.4g})",
        {"attempts": attempts, "nu0": nu0, "growth": growth},
    )


# ---------------------------------------------------------- verification

@dataclass(frozen=True)
class VerifyReport:
    metric: str
    n_samples: int
    counts: dict
    omega2_rms: float | None
    histogram: dict

    @property
    def conservative(self) -> bool:
        return self.counts["omega1"]["misclassified"] == 0 and self.counts["omega3"]["misclassified"] == 0

    def assert_conservative(self) -> None:
        if not self.conservative:
            raise ConservativenessError(
                f"{self.metric}: {self.counts['omega1']['misclassified']} Omega1 and "
                f"{self.counts['omega3']['misclassified']} Omega3 samples misclassified"
            )

    def summary(self) -> dict:
        return {
            "omega1": self.counts["omega1"],
            "omega2": self.counts["omega2"],
            "omega3": self.counts["omega3"],
            "omega2_rms": self.omega2_rms,
        }

    def to_dict(self) -> dict:
        return {
            "metric": self.metric, "n_samples": self.n_samples, **self.summary(),
            "conservative": self.conservative, "histogram": self.histogram,
        }


def verify(surrogate: SocSurrogate, dataset: StabilityDataset, bins: int = 10) -> VerifyReport:
    """Per-band classification counts, Omega2 RMS error and a margin histogram (read-only)."""
    if dataset.labels is None:
        dataset = partition(dataset, surrogate.g_lim, surrogate.nu or 0.0)
    counts = {}
    if len(dataset) == 0:
        empty = {"n": 0, "misclassified": 0}
        return VerifyReport(surrogate.metric, 0, {k: dict(empty) for k in ("omega1", "omega2", "omega3")}, None, {})
    values = surrogate.value(dataset.X)
    accept = values >= surrogate.g_lim
    for label, name, wrong in ((BELOW, "omega1", accept), (BAND, "omega2", ~accept), (ABOVE, "omega3", ~accept)):
        m = dataset.mask(label)
        counts[name] = {"n": int(m.sum()), "misclassified": int(np.sum(wrong & m))}
    m2 = dataset.mask(BAND) & ~dataset.infeasible
    rms = float(np.sqrt(np.mean((dataset.g[m2] - values[m2]) ** 2))) if m2.any() else None
    hist, edges = np.histogram(values - surrogate.g_lim, bins=bins)
    return VerifyReport(
        surrogate.metric, len(dataset), counts, rms, {"edges": edges.tolist(), "counts": hist.tolist()}
    )


# ------------------------------------------------------------ exact cones

def exact_soc_voltage(unit: str | None = None) -> SocSurrogate:
    """``||(P^, Q^)|| <= Q^ + Gamma`` over the layout (P^, Q^, Gamma)."""
    suffix = f"_{unit}" if unit else ""
    variables = (f"Phat{suffix}", f"Qhat{suffix}", f"Gamma{suffix}")
    A = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    name = f"g5[{unit}]" if unit else "g5"
    return SocSurrogate(name, A, np.zeros(2), np.array([0.0, 1.0, 1.0]), 0.0, variables, 0.0, None, {"method": "exact"})


def exact_soc_nadir(fp: FrequencyParams) -> SocSurrogate:
    """Nadir constraint as ``||(2 x1, sqrt(dP Td) sqrt(gamma) H_s, H - R)|| <= H + R``."""
    x1_sq = fp.x1_squared
    if x1_sq < 0:
        raise ParameterError("nadir constant x1^2 is negative")
    n_f = len(fp.gamma)
    A = np.zeros((n_f + 2, n_f + 2))
    b = np.zeros(n_f + 2)
    b[0] = 2.0 * math.sqrt(x1_sq)
    scale = math.sqrt(fp.delta_p * fp.t_d)
    for k, gam in enumerate(fp.gamma):
        A[1 + k, 2 + k] = scale * math.sqrt(gam)
    A[-1, 0], A[-1, 1] = 1.0, -1.0
    c = np.zeros(n_f + 2)
    c[0] = c[1] = 1.0
    variables = ("H", "R", *(f"Hs_{f}" for f in fp.farm_ids))
    return SocSurrogate("g6", A, b, c, 0.0, variables, 0.0, None, {"method": "exact", "x1_squared": x1_sq})


# ------------------------------------------------- linear equality fits

@dataclass(frozen=True, eq=False)
class LinearSurrogate:
    target: str
    features: tuple
    coefficients: np.ndarray
    intercept: float
    residuals: dict = field(default_factory=dict)

    def predict(self, F) -> np.ndarray:
        F = np.atleast_2d(np.asarray(F, dtype=float))
        return F @ self.coefficients + self.intercept

    def residual_stats(self, F, y) -> dict:
        y = np.asarray(y, dtype=float)
        r = y - self.predict(F)
        mean_abs = float(np.mean(np.abs(y)))
        max_abs = float(np.max(np.abs(r)))
        return {
            "n": int(len(y)),
            "max_abs": max_abs,
            "rms": float(np.sqrt(np.mean(r**2))),
            "mean_abs_target": mean_abs,
            "max_rel": max_abs / mean_abs if mean_abs > 0 else math.inf,
        }

    def coefficient_map(self) -> dict:
        return {name: float(k) for name, k in zip(self.features, self.coefficients)}

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "intercept": self.intercept,
            "coefficients": self.coefficient_map(),
            "residuals": self.residuals,
        }


def fit_equality_linear(targets: dict, features: FeatureVector) -> dict:
    """Ordinary least squares (ridge ``1e-8`` if rank deficient) per target, with intercept."""
    F = np.asarray(features.values, dtype=float)
    if F.ndim != 2 or F.shape[0] == 0:
        raise ValueError("empty regression dataset")
    D = np.hstack([F, np.ones((len(F), 1))])
    full_rank = np.linalg.matrix_rank(D) == D.shape[1]
    out = {}
    for name, y in targets.items():
        y = np.asarray(y, dtype=float)
        if y.shape != (len(F),):
            raise ValueError(f"target {name!r} length does not match features")
        if full_rank:
            beta, *_ = np.linalg.lstsq(D, y, rcond=None)
        else:
            beta = np.linalg.solve(D.T @ D + RIDGE_LAMBDA * np.eye(D.shape[1]), D.T @ y)
        lin = LinearSurrogate(name, tuple(features.names), beta[:-1], float(beta[-1]))
        stats = lin.residual_stats(F, y)
        stats["method"] = "ols" if full_rank else "ridge"
        out[name] = replace(lin, residuals=stats)
    return out

"""Ensemble uncertainty: decomposition, scoring metrics and recalibration.

Everything here is a pure function of arrays in original target units.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.stats import rankdata

from .errors import GnnuqError, LengthMismatch, NonPositiveVariance

LOG_2PI = math.log(2.0 * math.pi)
LEVELS = np.arange(1, 100) / 100.0
BARRIER = 1e-12


class EmptyValidation(GnnuqError, ValueError):
    pass


class DegenerateInput(GnnuqError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """Per-member predictions, shape ``(K, n)``, in original units."""

    mu: np.ndarray
    var: np.ndarray
    member_ids: tuple[str, ...] = ()

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.var, dtype=np.float64))
        if mu.shape != var.shape:
            raise LengthMismatch(f"mu {mu.shape} and var {var.shape} differ")
        if mu.shape[0] < 1:
            raise LengthMismatch("need at least one member")
        if not np.all(var > 0):
            raise NonPositiveVariance("member variances must be positive")
        ids = tuple(self.member_ids) or tuple(str(k) for k in range(mu.shape[0]))
        if len(ids) != mu.shape[0]:
            raise LengthMismatch(f"{len(ids)} member ids for {mu.shape[0]} members")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "var", var)
        object.__setattr__(self, "member_ids", ids)

    @property
    def k(self) -> int:
        return self.mu.shape[0]

    @property
    def n(self) -> int:
        return self.mu.shape[1]

    @classmethod
    def stack(cls, members, member_ids=()) -> "PredictionSet":
        """Build from a list of ``(mu, var)`` pairs."""
        mus, vars_ = zip(*members)
        lengths = {np.asarray(m).shape for m in mus + vars_}
        if len(lengths) != 1:
            raise LengthMismatch(f"member prediction lengths differ: {sorted(lengths)}")
        return cls(np.stack(mus), np.stack(vars_), tuple(member_ids))


@dataclass(frozen=True, eq=False)
class EnsembleSummary:
    mu: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray

    def scaled(self, a: float) -> "EnsembleSummary":
        """Scale standard deviations by ``a`` (variances by ``a**2``)."""
        a2 = a * a
        alea, epi = self.aleatoric * a2, self.epistemic * a2
        return EnsembleSummary(self.mu, alea, epi, alea + epi)


def ensemble_summary(preds: PredictionSet) -> EnsembleSummary:
    # centring on one member keeps identical members at exactly zero spread
    mu = preds.mu[0] + (preds.mu - preds.mu[0]).mean(axis=0)
    alea = preds.var.mean(axis=0)
    if preds.k == 1:
        epi = np.zeros_like(mu)
    else:
        epi = ((preds.mu - mu) ** 2).sum(axis=0) / (preds.k - 1)
    return EnsembleSummary(mu, alea, epi, alea + epi)


# ---------------------------------------------------------------------------
# likelihood


def _check(mu, var, y):
    mu, var, y = (np.asarray(v, dtype=np.float64).reshape(-1) for v in (mu, var, y))
    if not (mu.size == var.size == y.size) or mu.size == 0:
        raise LengthMismatch(f"lengths {mu.size}, {var.size}, {y.size}")
    return mu, var, y


def gaussian_nll(mu, var, y) -> float:
    mu, var, y = _check(mu, var, y)
    if not np.all(var > 0):
        raise NonPositiveVariance("variance must be positive")
    return float(0.5 * np.mean(LOG_2PI + np.log(var) + (mu - y) ** 2 / var))


def metric_nll(mu, total_var, y) -> float:
    return gaussian_nll(mu, total_var, y)


@dataclass(frozen=True)
class CalibrationParams:
    a: float
    b: float

    def apply(self, var):
        return self.a * np.asarray(var) + self.b


def _affine_objective(mu, var, y):
    r2 = (mu - y) ** 2

    def f(ab):
        a, b = ab
        v = a * var + b
        if a < 0 or np.any(v <= BARRIER):
            return 1e100
        return float(0.5 * np.mean(LOG_2PI + np.log(v) + r2 / v))

    return f


def fit_affine_variance(mu, var, y) -> CalibrationParams:
    """Nelder-Mead fit of ``a * var + b`` minimizing NLL, started at (1, 0)."""
    mu, var, y = _check(mu, var, y)
    f = _affine_objective(mu, var, y)
    db = 0.1 * float(np.mean(var))
    simplex = np.array([[1.0, 0.0], [1.1, 0.0], [1.0, db]])
    res = minimize(f, x0=simplex[0], method="Nelder-Mead",
                   options={"initial_simplex": simplex, "xatol": 1e-10, "fatol": 1e-10,
                            "maxiter": 2000})
    a, b = (float(v) for v in res.x)
    if not f((a, b)) <= f((1.0, 0.0)):
        a, b = 1.0, 0.0
    return CalibrationParams(a, b)


def calibrated_nll(val: EnsembleSummary, test: EnsembleSummary, y_val, y_test):
    """Fit the affine variance map on validation; return ``(params, cNLL_test)``."""
    if np.asarray(y_val).size == 0:
        raise EmptyValidation("calibrated NLL needs validation predictions")
    params = fit_affine_variance(val.mu, val.total, y_val)
    v = params.apply(test.total)
    if not np.all(v > 0):
        # the map is only guaranteed positive on the fitting set
        v = np.maximum(v, BARRIER)
    return params, gaussian_nll(test.mu, v, y_test)


# ---------------------------------------------------------------------------
# ranking


def spearman(errors, uncertainties) -> float | None:
    """Rank correlation with average ranks for ties; ``None`` if a vector is constant."""
    x = np.asarray(errors, dtype=np.float64).reshape(-1)
    u = np.asarray(uncertainties, dtype=np.float64).reshape(-1)
    if x.size != u.size:
        raise LengthMismatch(f"lengths {x.size} and {u.size}")
    if x.size < 2:
        raise DegenerateInput("need at least two points")
    if np.all(x == x[0]) or np.all(u == u[0]):
        return None
    rx, ru = rankdata(x) - (x.size + 1) / 2.0, rankdata(u) - (x.size + 1) / 2.0
    rho = float(np.dot(rx, ru) / math.sqrt(np.dot(rx, rx) * np.dot(ru, ru)))
    return max(-1.0, min(1.0, rho))


# ---------------------------------------------------------------------------
# calibration


def norm_ppf(p: float) -> float:
    """Inverse standard normal CDF (Wichura's AS241, about 1e-16 relative)."""
    if not 0.0 < p < 1.0:
        if p == 0.0:
            return -math.inf
        if p == 1.0:
            return math.inf
        raise ValueError("p must lie in [0, 1]")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                    + 67265.770927008700853) * r + 45921.953931549871457) * r
                  + 13731.693765509461125) * r + 1971.5909503065514427) * r
                + 133.14166789178437745) * r + 3.387132872796366608)
        den = (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                    + 39307.89580009271061) * r + 21213.794301586595867) * r
                  + 5394.1960214247511077) * r + 687.1870074920579083) * r
                + 42.313330701600911252) * r + 1.0)
        return q * num / den
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
                    + 0.24178072517745061177) * r + 1.27045825245236838258) * r
                  + 3.64784832476320460504) * r + 5.7694972214606914055) * r
                + 4.6303378461565452959) * r + 1.42343711074968357734)
        den = (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                    + 0.0151986665636164571966) * r + 0.14810397642748007459) * r
                  + 0.68976733498510000455) * r + 1.6763848301838038494) * r
                + 2.05319162663775882187) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 0.0012426609473880784386) * r + 0.026532189526576123093) * r
                  + 0.29656057182850489123) * r + 1.7848265399172913358) * r
                + 5.4637849111641143699) * r + 6.6579046435011037772)
        den = (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                    + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r
                  + 0.0148753612908506148525) * r + 0.13692988092273580531) * r
                + 0.59983220655588793769) * r + 1.0)
    x = num / den
    return -x if q < 0 else x


Z_LEVELS = np.array([norm_ppf((1.0 + c) / 2.0) for c in LEVELS])


@dataclass(frozen=True, eq=False)
class CalibrationCurve:
    levels: np.ndarray
    empirical: np.ndarray
    mca: float
    ece: float
    mce: float


def _standardized_errors(mu, var, y) -> np.ndarray:
    mu, var, y = _check(mu, var, y)
    if not np.all(var > 0):
        raise NonPositiveVariance("variance must be positive")
    return np.sort(np.abs(mu - y) / np.sqrt(var))


def _curve_from_sorted(ratio: np.ndarray) -> CalibrationCurve:
    n = ratio.size
    ef = np.searchsorted(ratio, Z_LEVELS, side="right") / n
    gap = np.abs(ef - LEVELS)
    # endpoints: c = 0 uses z = 0 and c = 1 uses z = inf
    c = np.concatenate([[0.0], LEVELS, [1.0]])
    ef_full = np.concatenate([[np.searchsorted(ratio, 0.0, side="right") / n], ef, [1.0]])
    g = np.abs(ef_full - c)
    mca = float(np.sum((g[1:] + g[:-1]) * np.diff(c)) / 2.0)
    return CalibrationCurve(LEVELS.copy(), ef, mca, float(gap.mean()), float(gap.max()))


def calibration_curve(mu, var, y) -> CalibrationCurve:
    return _curve_from_sorted(_standardized_errors(mu, var, y))


def miscalibration_area(mu, var, y) -> float:
    return calibration_curve(mu, var, y).mca


@dataclass(frozen=True, eq=False)
class ConfidenceCurve:
    percentiles: np.ndarray
    error: np.ndarray
    oracle: np.ndarray
    auco: float


def _drop_curve(err: np.ndarray, order: np.ndarray, metric: str) -> np.ndarray:
    ranked = err[order]
    n = ranked.size
    out = np.empty(100)
    for p in range(100):
        rest = ranked[(p * n) // 100:]
        if metric == "mae":
            out[p] = rest.mean()
        else:
            out[p] = math.sqrt(np.mean(rest ** 2))
    return out


def confidence_curve(mu, var, y, metric: str = "mae") -> ConfidenceCurve:
    """Error of the points kept after dropping the p% most uncertain, p = 0..99.

    Ties in uncertainty (and in the oracle's true error) are dropped in
    index order. AUCO is the signed area between curve and oracle.
    """
    if metric not in ("mae", "rmse"):
        raise ValueError(f"unknown metric {metric!r}")
    mu, var, y = _check(mu, var, y)
    err = np.abs(mu - y)
    by_unc = np.argsort(-np.asarray(var), kind="stable")
    by_err = np.argsort(-err, kind="stable")
    curve = _drop_curve(err, by_unc, metric)
    oracle = _drop_curve(err, by_err, metric)
    auco = float(np.sum(curve - oracle) / 100.0)
    return ConfidenceCurve(np.arange(100), curve, oracle, auco)


def coverage_stats(mu, var, y) -> tuple[float, float]:
    mu, var, y = _check(mu, var, y)
    err, sd = np.abs(mu - y), np.sqrt(var)
    return float(np.mean(err <= sd)), float(np.mean(err <= 2.0 * sd))


# ---------------------------------------------------------------------------
# recalibration


@dataclass(frozen=True)
class RecalibrationResult:
    a: float
    pre_mca: float
    post_mca: float


def fit_sd_scale(mu, var, y, n_grid: int = 400, tol: float = 1e-6) -> RecalibrationResult:
    """Scalar ``a`` on standard deviations minimizing MCA.

    A log-spaced grid over [1e-3, 1e3] (plus a = 1) locates the best cell;
    golden-section search then refines inside the neighbouring interval.
    """
    mu, var, y = _check(mu, var, y)
    base = _standardized_errors(mu, var, y)

    def mca(a: float) -> float:
        return _curve_from_sorted(base / a).mca

    grid = np.union1d(np.logspace(-3.0, 3.0, n_grid), [1.0])
    scores = np.array([mca(a) for a in grid])
    i = int(np.argmin(scores))
    best_a, best = float(grid[i]), float(scores[i])
    lo, hi = float(grid[max(i - 1, 0)]), float(grid[min(i + 1, grid.size - 1)])
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = hi - inv_phi * (hi - lo), lo + inv_phi * (hi - lo)
    fc, fd = mca(c), mca(d)
    while hi - lo > tol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - inv_phi * (hi - lo)
            fc = mca(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv_phi * (hi - lo)
            fd = mca(d)
        for a, f in ((c, fc), (d, fd)):
            if f < best:
                best_a, best = a, f
    return RecalibrationResult(best_a, mca(1.0), best)


def recalibrate(val: EnsembleSummary, test: EnsembleSummary, y_val):
    """Fit the SD scale on validation and apply it to both test variance parts."""
    if np.asarray(y_val).size == 0:
        raise EmptyValidation("recalibration needs validation predictions")
    res = fit_sd_scale(val.mu, val.total, y_val)
    return res, test.scaled(res.a)


# ---------------------------------------------------------------------------
# reports and files


def evaluate(test: EnsembleSummary, y_test, val: EnsembleSummary | None = None, y_val=None,
             recalibrate_with_val: bool = False) -> dict:
    """Report dict for one split; cNLL and recalibration need validation data."""
    y = np.asarray(y_test, dtype=np.float64)
    err = np.abs(test.mu - y)
    curve = calibration_curve(test.mu, test.total, y)
    cov1, cov2 = coverage_stats(test.mu, test.total, y)
    report = {
        "mae": float(err.mean()),
        "rmse": float(math.sqrt(np.mean(err ** 2))),
        "nll": metric_nll(test.mu, test.total, y),
        "cnll": None,
        "a": None,
        "b": None,
        "spearman": spearman(err, np.sqrt(test.total)),
        "mca": curve.mca,
        "ece": curve.ece,
        "mce": curve.mce,
        "auco": confidence_curve(test.mu, test.total, y).auco,
        "cov1": cov1,
        "cov2": cov2,
    }
    if val is not None:
        params, cnll = calibrated_nll(val, test, y_val, y)
        report.update(cnll=cnll, a=params.a, b=params.b)
    if recalibrate_with_val:
        if val is None:
            raise EmptyValidation("--recalibrate needs validation predictions")
        res, scaled = recalibrate(val, test, y_val)
        report["recal_a"] = res.a
        report["recal_mca"] = calibration_curve(scaled.mu, scaled.total, y).mca
    return report


def write_report(path, reports: dict) -> None:
    Path(path).write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")


def write_predictions(path, ids, y, preds: PredictionSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["id", "y"]
        for k in range(preds.k):
            header += [f"mu_{k}", f"var_{k}"]
        w.writerow(header)
        for j, (i, yj) in enumerate(zip(ids, y)):
            row = [i, repr(float(yj))]
            for k in range(preds.k):
                row += [repr(float(preds.mu[k, j])), repr(float(preds.var[k, j]))]
            w.writerow(row)


def read_predictions(path):
    """Return ``(ids, y, PredictionSet)`` from a predictions CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise LengthMismatch(f"{path}: empty predictions file")
    header = rows[0]
    if header[:2] != ["id", "y"] or len(header) < 4 or len(header) % 2:
        raise LengthMismatch(f"{path}: expected columns id, y, mu_k, var_k")
    k = (len(header) - 2) // 2
    for j in range(k):
        if header[2 + 2 * j:4 + 2 * j] != [f"mu_{j}", f"var_{j}"]:
            raise LengthMismatch(f"{path}: bad member columns near {header[2 + 2 * j]}")
    body = rows[1:]
    if any(len(r) != len(header) for r in body):
        raise LengthMismatch(f"{path}: ragged rows")
    ids = [r[0] for r in body]
    vals = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), -1)
    y = vals[:, 0]
    mu = vals[:, 1::2].T
    var = vals[:, 2::2].T
    return ids, y, PredictionSet(mu, var)


def write_calibration_csv(path, curve: CalibrationCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "empirical_fraction"])
        for c, ef in zip(curve.levels, curve.empirical):
            w.writerow([f"{c:.2f}", repr(float(ef))])


def write_confidence_csv(path, curve: ConfidenceCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["percentile", "mae", "oracle_mae"])
        for p, e, o in zip(curve.percentiles, curve.error, curve.oracle):
            w.writerow([int(p), repr(float(e)), repr(float(o))])

"""Evaluation of multi-treatment uplift predictions on randomised test data.

Error metrics (ATE error, PEHE), ranking metrics (per-arm QINI curve and the
arm-averaged coefficient), the budget-sweep allocation curve with its
normalised area (RAS-AUCC), and period-over-period stability summaries
against a baseline strategy (Impr, PRIO-10, PRDU-5, AD).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _backend
from .datagen import ObservationBatch

log = logging.getLogger(__name__)

LARGER_IS_BETTER = {"ate_error": False, "pehe": False, "qini": True, "ras_aucc": True}


def _uplift(preds: np.ndarray) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.float64)
    return preds[:, 1:] - preds[:, :1]


def ate_error(preds, batch: ObservationBatch, use_truth: bool = True) -> float:
    """Mean absolute ATE error over the treated arms.

    The true ATE comes from ``batch.true_probs`` when present, otherwise
    from the randomised group means.
    """
    preds = np.asarray(preds, dtype=np.float64)
    if len(preds) != len(batch):
        raise ValueError("prediction and batch row counts differ")
    n_arms = preds.shape[1]
    est = _uplift(preds).mean(axis=0)
    if use_truth and batch.true_probs is not None:
        true = _uplift(batch.true_probs).mean(axis=0)
    else:
        true = np.empty(n_arms - 1)
        ctl = batch.t == 0
        if not ctl.any():
            raise ValueError("no control rows and no ground truth")
        for t in range(1, n_arms):
            sel = batch.t == t
            if not sel.any():
                raise ValueError(f"arm {t} missing and no ground truth")
            true[t - 1] = batch.y[sel].mean() - batch.y[ctl].mean()
    return float(np.mean(np.abs(est - true)))


def pehe(pred_tau, true_tau) -> float:
    """Mean squared uplift error over individuals and arms (no square root)."""
    pred_tau = np.asarray(pred_tau, dtype=np.float64)
    true_tau = np.asarray(true_tau, dtype=np.float64)
    if pred_tau.shape != true_tau.shape:
        raise ValueError(f"shape mismatch {pred_tau.shape} vs {true_tau.shape}")
    return float(np.mean((pred_tau - true_tau) ** 2))


def canonical_order(score: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending row index."""
    score = np.asarray(score, dtype=np.float64)
    return np.lexsort((np.arange(len(score)), -score))


@dataclass
class QiniCurve:
    m: np.ndarray
    v: np.ndarray
    n: int


def qini_values(tau_hat, t, y, arm: int, grid: int = 100) -> QiniCurve:
    """QINI curve V(m) of ``arm`` against control on a uniform m grid.

    Grid points whose top-m set holds no control row are dropped, so the
    curve starts at the first m with control presence.
    """
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    t = np.asarray(t)
    y = np.asarray(y, dtype=np.float64)
    keep = np.flatnonzero((t == 0) | (t == arm))
    if not np.any(t[keep] == arm) or not np.any(t[keep] == 0):
        raise ValueError(f"arm {arm} and control must both be present")
    order = keep[canonical_order(tau_hat[keep])]
    tt, yy = t[order], y[order]
    is_trt = tt == arm
    cum_y_trt = np.cumsum(yy * is_trt)
    cum_y_ctl = np.cumsum(yy * ~is_trt)
    cum_n_trt = np.cumsum(is_trt)
    cum_n_ctl = np.cumsum(~is_trt)
    n = len(order)
    j = np.arange(1, grid + 1)
    size = -(-j * n // grid)  # ceil(j n / grid)
    ok = size > 0
    s = size[ok] - 1
    ctl = cum_n_ctl[s]
    defined = ctl > 0
    s = s[defined]
    v = cum_y_trt[s] - cum_y_ctl[s] * cum_n_trt[s] / cum_n_ctl[s]
    m = (j[ok][defined]) / grid
    return QiniCurve(m, v, n)


def qini_area(curve: QiniCurve) -> float:
    """Area above the straight random-targeting line, per sample."""
    m = np.concatenate([[0.0], curve.m])
    v = np.concatenate([[0.0], curve.v])
    area = float(np.sum(0.5 * (m[1:] - m[:-1]) * (v[1:] + v[:-1])))
    return (area - 0.5 * float(curve.v[-1])) / curve.n


def qini_coefficient(preds, batch: ObservationBatch, grid: int = 100) -> float:
    tau = _uplift(preds)
    vals = [qini_area(qini_values(tau[:, a - 1], batch.t, batch.y, a, grid))
            for a in range(1, tau.shape[1] + 1)]
    return float(np.mean(vals))


@dataclass
class CostModel:
    """Coupon amount per arm; cost is paid on conversion, reward is the conversion."""

    amounts: tuple[float, ...] = (0.0, 1.0, 2.0)

    def __post_init__(self):
        self.amounts = tuple(float(a) for a in self.amounts)
        if any(b < a for a, b in zip(self.amounts, self.amounts[1:])):
            raise ValueError("coupon amounts must be non-decreasing in arm index")

    @classmethod
    def linear(cls, n_arms: int) -> "CostModel":
        return cls(tuple(float(t) for t in range(n_arms)))

    def expected_increments(self, preds) -> tuple[np.ndarray, np.ndarray]:
        """Expected incremental (cost, reward) of each arm over arm 0, shape (N, A)."""
        preds = np.asarray(preds, dtype=np.float64)
        amt = np.asarray(self.amounts[: preds.shape[1]])
        cost = preds * amt
        return cost - cost[:, :1], preds - preds[:, :1]

    def realized(self, t, y) -> tuple[np.ndarray, np.ndarray]:
        amt = np.asarray(self.amounts)
        y = np.asarray(y, dtype=np.float64)
        return amt[np.asarray(t)] * y, y.copy()


@dataclass
class Upgrades:
    """Per-individual upgrade steps sorted by descending marginal ROI."""

    ind: np.ndarray
    to_arm: np.ndarray
    d_cost: np.ndarray
    d_reward: np.ndarray
    n: int

    @classmethod
    def from_predictions(cls, preds, cost_model: CostModel) -> "Upgrades":
        cost, reward = cost_model.expected_increments(preds)
        ind, to_arm, d_cost, d_reward = _backend.upgrade_chains(cost, reward)
        roi = d_reward / d_cost
        step = np.arange(len(ind))  # keeps each chain in order on ROI ties
        order = np.lexsort((step, -roi))
        return cls(ind[order], to_arm[order], d_cost[order], d_reward[order], len(cost))

    def allocate(self, budget: float) -> np.ndarray:
        if budget < 0:
            raise ValueError("budget must be non-negative")
        arm = np.zeros(self.n, dtype=np.int64)
        spent = np.cumsum(self.d_cost)
        over = np.flatnonzero(spent > budget)
        k = over[0] if len(over) else len(spent)
        # each person ends on the last applied step of their chain
        last = np.full(self.n, -1)
        np.maximum.at(last, self.ind[:k], np.arange(k))
        hit = last >= 0
        arm[hit] = self.to_arm[last[hit]]
        return arm


def greedy_allocate(preds, cost_model: CostModel, budget: float) -> np.ndarray:
    """Greedy marginal-ROI allocation of arms under an expected-cost budget."""
    return Upgrades.from_predictions(preds, cost_model).allocate(budget)


def ras_delta(t_rct, alloc, c, r) -> tuple[float, float] | None:
    """Incremental (cost, reward) of an allocation, estimated on RCT rows.

    With S the individuals the allocation treats (arm > 0), the estimate is
    |S| times (mean over rows of S whose randomised arm > 0 equals the
    allocated arm, minus mean over randomised-control rows of S). When the
    allocation treats everyone |S| = N. Returns None when either group is
    empty.
    """
    t_rct = np.asarray(t_rct)
    alloc = np.asarray(alloc)
    c = np.asarray(c, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    treated = alloc > 0
    matched = (t_rct > 0) & (t_rct == alloc)
    ctl = (t_rct == 0) & treated
    if not matched.any() or not ctl.any():
        return None
    n = int(treated.sum())
    return (n * (c[matched].mean() - c[ctl].mean()),
            n * (r[matched].mean() - r[ctl].mean()))


@dataclass
class CurveData:
    budgets: np.ndarray
    cost: np.ndarray
    reward: np.ndarray
    endpoint: tuple[float, float]

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """Curve from the origin through the budget points to the endpoint."""
        x = np.concatenate([[0.0], self.cost, [self.endpoint[0]]])
        y = np.concatenate([[0.0], self.reward, [self.endpoint[1]]])
        return x, y


def budget_grid(preds, cost_model: CostModel, n_budgets: int = 50) -> np.ndarray:
    cost, _ = cost_model.expected_increments(preds)
    return np.linspace(0.0, float(cost[:, -1].sum()), n_budgets)


def ras_curve(preds, batch: ObservationBatch, cost_model: CostModel | None = None,
              budgets=None, c=None, r=None) -> CurveData:
    preds = np.asarray(preds, dtype=np.float64)
    if len(preds) != len(batch):
        raise ValueError("prediction and batch row counts differ")
    cost_model = cost_model or CostModel.linear(preds.shape[1])
    if c is None or r is None:
        c, r = cost_model.realized(batch.t, batch.y)
    if budgets is None:
        budgets = budget_grid(preds, cost_model)
    budgets = np.asarray(budgets, dtype=np.float64)
    if np.any(np.diff(budgets) <= 0):
        raise ValueError("budgets must be strictly increasing")
    ups = Upgrades.from_predictions(preds, cost_model)
    sweep = _backend.ras_sweep(ups.ind, ups.to_arm, ups.d_cost, ups.n,
                               np.asarray(batch.t, dtype=np.int64), c, r, budgets)
    n_alloc, nm, sc, sr, nc, cc, cr = sweep.T
    ok = (nm > 0) & (nc > 0)
    if not ok.all():
        log.debug("%d budget points without matched rows skipped", int((~ok).sum()))
    d_cost = n_alloc[ok] * (sc[ok] / nm[ok] - cc[ok] / nc[ok])
    d_reward = n_alloc[ok] * (sr[ok] / nm[ok] - cr[ok] / nc[ok])
    n = len(batch)
    top = np.full(n, preds.shape[1] - 1)
    end = ras_delta(batch.t, top, c, r)
    if end is None:
        raise ValueError("largest arm absent from the RCT data")
    return CurveData(budgets[ok], d_cost, d_reward, end)


def ras_aucc_from_curve(x, y) -> float:
    """(A_S - A_L) / A_L with A_L the triangle under the chord to the last point."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a_s = float(np.sum(0.5 * (x[1:] - x[:-1]) * (y[1:] + y[:-1])))
    a_l = float(0.5 * (x[-1] - x[0]) * (y[-1] + y[0]))
    if a_l == 0.0:
        raise ZeroDivisionError("straight-line area is zero")
    return (a_s - a_l) / a_l


def ras_aucc(preds, batch: ObservationBatch, cost_model: CostModel | None = None,
             budgets=None) -> float:
    curve = ras_curve(preds, batch, cost_model, budgets)
    return ras_aucc_from_curve(*curve.points())


def evaluate(preds, batch: ObservationBatch, cost_model: CostModel | None = None) -> dict:
    """All four per-period metrics; PEHE only when ground truth is attached."""
    preds = np.asarray(preds, dtype=np.float64)
    out = {"ate_error": ate_error(preds, batch)}
    if batch.true_probs is not None:
        out["pehe"] = pehe(_uplift(preds), _uplift(batch.true_probs))
    out["qini"] = qini_coefficient(preds, batch)
    out["ras_aucc"] = ras_aucc(preds, batch, cost_model)
    return out


def improvement(value: float, baseline: float, larger_is_better: bool = True) -> float:
    """Signed relative improvement over the baseline, in percent."""
    if baseline == 0:
        raise ZeroDivisionError("baseline value is zero")
    impr = (value - baseline) / abs(baseline) * 100.0
    return impr if larger_is_better else -impr


def prio10(improvements) -> float:
    imp = np.asarray(improvements, dtype=np.float64)
    if imp.size == 0:
        raise ValueError("at least one period is required")
    return float(np.sum(imp > 10.0) * 100.0 / imp.size)


def prdu5(improvements) -> float:
    imp = np.asarray(improvements, dtype=np.float64)
    if imp.size == 0:
        raise ValueError("at least one period is required")
    return float(np.sum(imp > -5.0) * 100.0 / imp.size)


def ad(series, baseline_series) -> float:
    a = np.asarray(series, dtype=np.float64)
    b = np.asarray(baseline_series, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("series must be non-empty and of equal length")
    return float(np.mean(a - b))


@dataclass
class StabilityReport:
    improvements: list[float]
    prio10: float
    prdu5: float
    ad: float


def stability(series, baseline_series, larger_is_better: bool) -> StabilityReport:
    imp = [improvement(a, b, larger_is_better) for a, b in zip(series, baseline_series)]
    return StabilityReport(imp, prio10(imp), prdu5(imp), ad(series, baseline_series))

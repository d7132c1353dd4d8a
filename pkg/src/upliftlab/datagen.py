"""Drifting synthetic uplift streams and CSV ingestion.

Three coupon levels (t = 0, 1, 2) with monotone response surfaces over
[0, 1]^2 whose coefficients drift with the period index, covariates drawn
from a per-period mixture (covariate shift), and a region-dependent
treatment policy on the training split (selection bias). The test split is
a randomised trial.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_ARMS = 3
N_PERIODS = 7
NOISE_STD = 0.01  # N(0, 1e-4) read as a variance


class DataFormatError(ValueError):
    """Malformed observation file; the message names the offending line."""


def drift(i: int, k: int) -> float:
    """Concept-drift offset for arm ``i`` in period ``k``."""
    if i not in (0, 1, 2):
        raise ValueError(f"treatment index must be 0, 1 or 2, got {i}")
    if not 0 <= k <= 6:
        raise ValueError(f"period must be in 0..6, got {k}")
    if k <= 3:
        return 0.1 * i * k + 0.2 * k
    return -0.1 * i * k + 0.65 * i - 0.2 * k + 1.3


# (x1^2, x2^2, x2 coefficient) per arm
_ARM_COEFS = ((0.6, 0.0, 0.6), (0.7, 0.1, 0.5), (0.9, 0.15, 0.5))


def response_logits(k: int, x1, x2) -> np.ndarray:
    """Noise-free logits of the three response surfaces, shape (N, 3)."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    cols = []
    for t, (a, b, c) in enumerate(_ARM_COEFS):
        d = drift(t, k)
        cols.append(
            a * x1 ** 2 + b * x2 ** 2 + x1 * x2 ** 2
            - (0.5 - d) * x1 - (c - 0.5 * d) * x2 + 0.2 * d
        )
    return np.stack(cols, axis=-1)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def response_prob(k: int, t: int, x, noise: float = 0.0, rng=None):
    """Response probability of arm ``t`` at covariate pair(s) ``x``.

    ``noise`` is the standard deviation of the Gaussian term added to the
    logit; it is drawn independently per point.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = response_logits(k, x[:, 0], x[:, 1])[:, t]
    if noise > 0:
        rng = np.random.default_rng(rng)
        z = z + rng.normal(0.0, noise, size=z.shape)
    p = sigmoid(z)
    return p if p.size > 1 else float(p[0])


@dataclass
class CovariateMixture:
    """Four axis-aligned truncated normals plus a uniform on [0,1]^d."""

    means: np.ndarray  # (4, d)
    stds: np.ndarray  # (4, d)
    weights: np.ndarray = field(default_factory=lambda: np.full(5, 0.2))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def random(cls, dim: int, rng, n_normal: int = 4, weights=None) -> "CovariateMixture":
        rng = np.random.default_rng(rng)
        means = rng.uniform(0.2, 0.8, size=(n_normal, dim))
        stds = rng.uniform(0.01, 0.1, size=(n_normal, dim))
        if weights is None:
            weights = np.full(n_normal + 1, 1.0 / (n_normal + 1))
        return cls(means, stds, np.asarray(weights, dtype=np.float64))

    @classmethod
    def uniform_only(cls, dim: int) -> "CovariateMixture":
        return cls(np.full((4, dim), 0.5), np.full((4, dim), 0.05), np.array([0, 0, 0, 0, 1.0]))


def sample_covariates(mix: CovariateMixture, n: int, seed) -> np.ndarray:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(mix.weights), size=n, p=mix.weights / mix.weights.sum())
    noise = rng.standard_normal((n, mix.dim))
    unif = rng.uniform(0.0, 1.0, size=(n, mix.dim))
    n_normal = mix.means.shape[0]
    x = np.empty((n, mix.dim))
    is_unif = comp == n_normal
    x[is_unif] = unif[is_unif]
    idx = ~is_unif
    c = comp[idx]
    x[idx] = np.clip(mix.means[c] + mix.stds[c] * noise[idx], 0.0, 1.0)
    return x


# preferred arm first, remaining arms by index
_CASCADES = {"low": (0, 1, 2), "high": (1, 0, 2), "mid": (2, 0, 1)}


def assign_treatment_train(x, seed) -> np.ndarray:
    """Selection-biased treatment policy of the training split."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rng = np.random.default_rng(seed)
    s = x[:, 0] + x[:, 1]
    first = rng.uniform(size=len(s)) < 0.6
    second = rng.uniform(size=len(s)) < 0.5
    order = np.empty((len(s), 3), dtype=np.int64)
    order[:] = _CASCADES["mid"]
    order[s < 0.8] = _CASCADES["low"]
    order[s > 1.2] = _CASCADES["high"]
    pick = np.where(first, 0, np.where(second, 1, 2))
    return order[np.arange(len(s)), pick]


@dataclass
class ObservationBatch:
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    true_probs: np.ndarray | None = None
    period: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        n = len(self.x)
        if self.x.ndim != 2 or len(self.t) != n or len(self.y) != n:
            raise ValueError("covariates, treatments and outcomes must have equal length")
        if self.true_probs is not None:
            self.true_probs = np.asarray(self.true_probs, dtype=np.float64)
            if self.true_probs.shape[0] != n:
                raise ValueError("true_probs row count mismatch")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "ObservationBatch":
        tp = None if self.true_probs is None else self.true_probs[idx]
        return ObservationBatch(self.x[idx], self.t[idx], self.y[idx], tp, self.period)

    @staticmethod
    def concat(batches: list["ObservationBatch"]) -> "ObservationBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            raise ValueError("nothing to concatenate")
        tp = None
        if all(b.true_probs is not None for b in batches):
            tp = np.concatenate([b.true_probs for b in batches])
        return ObservationBatch(
            np.concatenate([b.x for b in batches]),
            np.concatenate([b.t for b in batches]),
            np.concatenate([b.y for b in batches]),
            tp,
            batches[-1].period,
        )

    def equals(self, other: "ObservationBatch") -> bool:
        same_tp = (self.true_probs is None and other.true_probs is None) or (
            self.true_probs is not None and other.true_probs is not None
            and np.array_equal(self.true_probs, other.true_probs)
        )
        return (np.array_equal(self.x, other.x) and np.array_equal(self.t, other.t)
                and np.array_equal(self.y, other.y) and same_tp)


@dataclass
class PeriodDataset:
    train: ObservationBatch
    test: ObservationBatch
    rct: bool = True


def _stream(seed, k, name):
    tags = {"mixture": 0, "train_x": 1, "train_t": 2, "train_y": 3,
            "test_x": 4, "test_t": 5, "test_y": 6}
    return np.random.default_rng([int(seed), int(k), tags[name]])


def _true_probs(k: int, x: np.ndarray, noise: float, rng) -> np.ndarray:
    z = response_logits(k, x[:, 0], x[:, 1])
    if x.shape[1] > 2:
        z = z + 0.1 * np.sum(x[:, 2:] - 0.5, axis=1, keepdims=True)
    if noise > 0:
        z = z + rng.normal(0.0, noise, size=z.shape)
    return sigmoid(z)


def _labels(p: np.ndarray, t: np.ndarray, rng) -> np.ndarray:
    chosen = p[np.arange(len(t)), t]
    return (rng.uniform(size=len(t)) < chosen).astype(np.float64)


def gen_period(k: int, n_train: int = 10_000, n_test: int = 50_000, seed: int = 0,
               noise: float = NOISE_STD, dim: int = 2) -> PeriodDataset:
    """One period: biased-assignment training split and RCT test split."""
    if not 0 <= k <= 6:
        raise ValueError(f"period must be in 0..6, got {k}")
    if dim < 2:
        raise ValueError("dim must be at least 2")
    mix = CovariateMixture.random(dim, _stream(seed, k, "mixture"))

    x_tr = sample_covariates(mix, n_train, _stream(seed, k, "train_x"))
    t_tr = assign_treatment_train(x_tr, _stream(seed, k, "train_t"))
    rng = _stream(seed, k, "train_y")
    p_tr = _true_probs(k, x_tr, noise, rng)
    y_tr = _labels(p_tr, t_tr, rng)

    x_te = sample_covariates(mix, n_test, _stream(seed, k, "test_x"))
    t_te = _stream(seed, k, "test_t").integers(0, N_ARMS, size=n_test)
    rng = _stream(seed, k, "test_y")
    p_te = _true_probs(k, x_te, noise, rng)
    y_te = _labels(p_te, t_te, rng)

    return PeriodDataset(
        ObservationBatch(x_tr, t_tr, y_tr, p_tr, k),
        ObservationBatch(x_te, t_te, y_te, p_te, k),
        rct=True,
    )


def gen_highdim_period(k: int, n_train: int = 10_000, n_test: int = 50_000, seed: int = 0,
                       noise: float = NOISE_STD) -> PeriodDataset:
    """10-d variant: x1, x2 drive the surfaces, x3..x10 add a shared linear shift."""
    return gen_period(k, n_train, n_test, seed, noise, dim=10)


def gen_stream(n_periods: int = 7, n_train: int = 10_000, n_test: int = 50_000, seed: int = 0,
               noise: float = NOISE_STD, dim: int = 2) -> list[PeriodDataset]:
    return [gen_period(k, n_train, n_test, seed, noise, dim) for k in range(n_periods)]


def write_csv(batch: ObservationBatch, path) -> None:
    path = Path(path)
    d = batch.dim
    header = [f"x{j}" for j in range(d)] + ["t", "y"]
    if batch.true_probs is not None:
        header += [f"p{j}" for j in range(batch.true_probs.shape[1])]
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for i in range(len(batch)):
            row = [repr(float(v)) for v in batch.x[i]] + [str(int(batch.t[i])), str(int(batch.y[i]))]
            if batch.true_probs is not None:
                row += [repr(float(v)) for v in batch.true_probs[i]]
            w.writerow(row)


def load_csv(path, n_arms: int | None = None, period: int | None = None) -> ObservationBatch:
    """Read ``x0..x{d-1},t,y[,p0..pT]``. Errors name the 1-based file line."""
    path = Path(path)
    with path.open(newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file (line 1)") from None
        header = [h.strip() for h in header]
        if "t" not in header or "y" not in header:
            raise DataFormatError(f"{path}: line 1: header needs 't' and 'y' columns")
        x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
        p_cols = [i for i, h in enumerate(header) if h.startswith("p")]
        if not x_cols:
            raise DataFormatError(f"{path}: line 1: no covariate columns")
        ti, yi = header.index("t"), header.index("y")
        if p_cols:
            if n_arms is not None and n_arms != len(p_cols):
                raise DataFormatError(f"{path}: line 1: {len(p_cols)} p-columns but n_arms={n_arms}")
            n_arms = len(p_cols)
        elif n_arms is None:
            n_arms = N_ARMS
        xs, ts, ys, ps = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                x = [float(row[i]) for i in x_cols]
                t = int(row[ti])
                y = float(row[yi])
                p = [float(row[i]) for i in p_cols]
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            if y not in (0.0, 1.0):
                raise DataFormatError(f"{path}: line {lineno}: outcome must be 0 or 1, got {row[yi]}")
            if not 0 <= t < n_arms:
                raise DataFormatError(f"{path}: line {lineno}: treatment {t} outside 0..{n_arms - 1}")
            if not all(np.isfinite(x)):
                raise DataFormatError(f"{path}: line {lineno}: non-finite covariate")
            xs.append(x)
            ts.append(t)
            ys.append(y)
            ps.append(p)
    if not xs:
        raise DataFormatError(f"{path}: no data rows")
    tp = np.asarray(ps, dtype=np.float64) if p_cols else None
    return ObservationBatch(np.asarray(xs), np.asarray(ts), np.asarray(ys), tp, period)

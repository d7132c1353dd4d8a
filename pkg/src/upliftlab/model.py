"""Multi-treatment disentangled counterfactual regression (DR-CFR).

Three representation nets split the covariates into instrumental (gamma),
confounding (delta) and adjustment (upsilon) factors. A softmax head on
delta gives the propensities behind the importance weights, a softmax
classifier on (gamma, delta) reconstructs the assignment rule, and a shared
trunk on (delta, upsilon) feeds one sigmoid response head per arm.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import ObservationBatch
from .numerics import (
    EPS_PROB,
    AdamState,
    MlpSpec,
    ParamStore,
    adam_step,
    clamp_prob,
    commit_batch_stats,
    mlp_backward,
    mlp_forward,
    sinkhorn_with_grad,
    xavier_init,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "upliftlab.drcfr"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class DrcfrConfig:
    n_in: int = 2
    n_arms: int = 3
    rep_hidden: tuple[int, ...] = (20, 20)
    prop_hidden: tuple[int, ...] = (20,)
    clf_hidden: tuple[int, ...] = (20,)
    trunk_hidden: tuple[int, ...] = (10, 20, 10, 20)
    head_hidden: tuple[int, ...] = (30, 30)
    alpha: float = 1.0  # assignment classifier cross-entropy
    beta: float = 1.0  # imbalance
    gamma: float = 1.0  # ATE
    delta: float = 1.0  # monotonicity
    lam: float = 0.01  # squared-weight penalty
    prop_weight: float = 1.0  # propensity head cross-entropy
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 256
    sinkhorn_reg: float = 0.1
    sinkhorn_iters: int = 50
    batch_norm: bool = True
    bn_momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name in ("rep_hidden", "prop_hidden", "clf_hidden", "trunk_hidden", "head_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.n_arms < 2:
            raise ValueError("need at least two arms")
        for name in ("alpha", "beta", "gamma", "delta", "lam", "prop_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must be in [0, 1)")

    def loss_weights(self) -> dict[str, float]:
        return {"fac": 1.0, "ce": self.alpha, "prop": self.prop_weight, "im": self.beta,
                "ate": self.gamma, "mono": self.delta, "reg": self.lam}

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DrcfrConfig":
        return cls(**d)

    def specs(self) -> dict[str, MlpSpec]:
        rep_out = self.rep_hidden[-1]
        a = self.n_arms
        bn = self.batch_norm
        specs = {
            "gamma": MlpSpec((self.n_in, *self.rep_hidden), "relu", "identity", bn),
            "delta": MlpSpec((self.n_in, *self.rep_hidden), "relu", "identity", bn),
            "upsilon": MlpSpec((self.n_in, *self.rep_hidden), "relu", "identity", bn),
            "propensity": MlpSpec((rep_out, *self.prop_hidden, a), "relu", "softmax", bn),
            "classifier": MlpSpec((2 * rep_out, *self.clf_hidden, a), "relu", "softmax", bn),
            "trunk": MlpSpec((2 * rep_out, *self.trunk_hidden), "relu", "identity", bn),
        }
        for t in range(a):
            specs[f"head{t}"] = MlpSpec((self.trunk_hidden[-1], *self.head_hidden, 1), "relu", "sigmoid", bn)
        return specs


@dataclass
class ForwardPass:
    rep: dict
    tapes: dict
    prop: np.ndarray
    clf: np.ndarray
    preds: np.ndarray  # raw sigmoid outputs, (N, A)


class DrcfrModel:
    def __init__(self, config: DrcfrConfig, seed=None, params: dict | None = None):
        self.config = config
        self.specs = config.specs()
        seed = config.seed if seed is None else seed
        if params is None:
            params = {name: xavier_init(spec, [int(seed), i])
                      for i, (name, spec) in enumerate(self.specs.items())}
        self.params: dict[str, ParamStore] = params
        self._pending: list = []  # training-mode tapes whose batch moments await commit_stats

    # -- parameter bookkeeping -------------------------------------------------
    def stores(self) -> list[ParamStore]:
        return [self.params[name] for name in self.specs]

    def zero_grad(self) -> None:
        """Clear gradients and any uncommitted batch moments."""
        for s in self.stores():
            s.zero_grad()
        self._pending = []

    def commit_stats(self) -> None:
        """Fold the batch moments of training-mode passes since the last
        ``zero_grad`` into the running moments. Call after the optimizer step."""
        for tape in self._pending:
            commit_batch_stats(tape, self.config.bn_momentum)
        self._pending = []

    def copy(self) -> "DrcfrModel":
        return DrcfrModel(self.config, params={k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(s.n_params() for s in self.stores())

    def flat(self) -> np.ndarray:
        return np.concatenate([s.flat() for s in self.stores()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([s.flat_grad() for s in self.stores()])

    def set_flat(self, flat) -> None:
        pos = 0
        for s in self.stores():
            n = s.n_params()
            s.set_flat(flat[pos:pos + n])
            pos += n

    def equals(self, other: "DrcfrModel") -> bool:
        return all(self.params[k].equals(other.params[k]) for k in self.specs)

    # -- forward / backward ------------------------------------------------------
    def forward(self, x, train: bool = False) -> ForwardPass:
        """``train`` normalises with batch moments; the running moments are only
        updated by ``commit_stats``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.n_in:
            raise ValueError(f"expected (N, {self.config.n_in}) covariates, got {x.shape}")
        s, p = self.specs, self.params
        tapes, rep = {}, {}
        for name in ("gamma", "delta", "upsilon"):
            rep[name], tapes[name] = mlp_forward(s[name], p[name], x, train)
        prop, tapes["propensity"] = mlp_forward(s["propensity"], p["propensity"], rep["delta"], train)
        clf, tapes["classifier"] = mlp_forward(
            s["classifier"], p["classifier"], np.hstack([rep["gamma"], rep["delta"]]), train)
        h, tapes["trunk"] = mlp_forward(
            s["trunk"], p["trunk"], np.hstack([rep["delta"], rep["upsilon"]]), train)
        cols = []
        for t in range(self.config.n_arms):
            out, tapes[f"head{t}"] = mlp_forward(s[f"head{t}"], p[f"head{t}"], h, train)
            cols.append(out)
        if train and self.config.batch_norm:
            self._pending.extend(tapes.values())
        return ForwardPass(rep, tapes, prop, clf, np.hstack(cols))

    def backward(self, fp: ForwardPass, g_preds=None, g_prop=None, g_clf=None, g_upsilon=None) -> None:
        """Accumulate parameter gradients for upstream gradients on the outputs."""
        k = self.config.rep_hidden[-1]
        g_rep = {name: np.zeros_like(v) for name, v in fp.rep.items()}
        if g_preds is not None:
            g_h = None
            for t in range(self.config.n_arms):
                g = mlp_backward(fp.tapes[f"head{t}"], g_preds[:, t:t + 1])
                g_h = g if g_h is None else g_h + g
            g_in = mlp_backward(fp.tapes["trunk"], g_h)
            g_rep["delta"] += g_in[:, :k]
            g_rep["upsilon"] += g_in[:, k:]
        if g_clf is not None:
            g_in = mlp_backward(fp.tapes["classifier"], g_clf)
            g_rep["gamma"] += g_in[:, :k]
            g_rep["delta"] += g_in[:, k:]
        if g_prop is not None:
            g_rep["delta"] += mlp_backward(fp.tapes["propensity"], g_prop)
        if g_upsilon is not None:
            g_rep["upsilon"] += g_upsilon
        for name in ("gamma", "delta", "upsilon"):
            if np.any(g_rep[name]):
                mlp_backward(fp.tapes[name], g_rep[name])

    def predict_all(self, x) -> np.ndarray:
        return clamp_prob(self.forward(x).preds)

    def uplift(self, x) -> np.ndarray:
        return uplift_from_preds(self.predict_all(x))

    def propensity(self, x) -> np.ndarray:
        return self.forward(x).prop

    # -- persistence -------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "nets": {name: self.params[name].flat().tolist() for name in self.specs},
            "stats": {name: self.params[name].stats_flat().tolist() for name in self.specs},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DrcfrModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"not a model checkpoint (format={d.get('format')!r})")
        if d.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {d.get('version')!r}")
        model = cls(DrcfrConfig.from_dict(d["config"]))
        for name, store in model.params.items():
            flat = np.asarray(d["nets"][name], dtype=np.float64)
            if flat.size != store.n_params():
                raise CheckpointError(f"net {name}: expected {store.n_params()} values, got {flat.size}")
            store.set_flat(flat)
            stats = np.asarray(d["stats"][name], dtype=np.float64)
            try:
                store.set_stats_flat(stats)
            except ValueError as exc:
                raise CheckpointError(f"net {name}: {exc}") from None
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DrcfrModel":
        try:
            d = json.loads(Path(path).read_text())
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
        try:
            return cls.from_dict(d)
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: corrupt checkpoint ({exc!r})") from None


def derive_seed(*parts: int) -> int:
    """Collision-resistant 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(v) for v in parts]).generate_state(1)[0])


def uplift_from_preds(preds) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.float64)
    return preds[:, 1:] - preds[:, :1]


# -- losses ---------------------------------------------------------------------
# Each loss returns (value, gradient w.r.t. its differentiable input).

def arm_frequencies(t, n_arms: int) -> np.ndarray:
    freq = np.bincount(np.asarray(t), minlength=n_arms)[:n_arms] / len(t)
    if np.any(freq == 0):
        raise ValueError(f"arm(s) {np.flatnonzero(freq == 0).tolist()} absent from the training set")
    return freq


def reweight(prop, t, arm_freq) -> np.ndarray:
    """Importance weights 1 + sum_{j != t_i} p(t_i)/p(j) * pi(j|x)/pi(t_i|x)."""
    prop = clamp_prob(np.asarray(prop, dtype=np.float64))
    t = np.asarray(t)
    arm_freq = np.asarray(arm_freq, dtype=np.float64)
    rows = np.arange(len(t))
    own = prop[rows, t]
    ratio = (arm_freq[t][:, None] / arm_freq[None, :]) * (prop / own[:, None])
    ratio[rows, t] = 0.0
    return 1.0 + ratio.sum(axis=1)


def loss_factual(y, p_factual, weights):
    """Weighted binary cross-entropy, (1/N) sum w_i * BCE_i."""
    y = np.asarray(y, dtype=np.float64)
    p_raw = np.asarray(p_factual, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    p = clamp_prob(p_raw)
    n = len(y)
    bce = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    grad = w * (-y / p + (1.0 - y) / (1.0 - p)) / n
    grad = np.where((p_raw > EPS_PROB) & (p_raw < 1.0 - EPS_PROB), grad, 0.0)
    return float(np.sum(w * bce) / n), grad


def loss_ce(probs, t):
    """Mean negative log-likelihood of the observed arm under softmax probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    t = np.asarray(t)
    rows = np.arange(len(t))
    p_raw = probs[rows, t]
    p = clamp_prob(p_raw)
    grad = np.zeros_like(probs)
    grad[rows, t] = np.where((p_raw > EPS_PROB) & (p_raw < 1.0 - EPS_PROB), -1.0 / (len(t) * p), 0.0)
    return float(-np.mean(np.log(p))), grad


def loss_imbalance(upsilon, t, n_arms: int, reg: float = 0.1, iters: int = 50):
    """Sum over treated arms of the Sinkhorn distance to the control representations.

    Arms (or control) missing from the batch contribute nothing; the number
    of skipped arms is returned as the third element.
    """
    upsilon = np.asarray(upsilon, dtype=np.float64)
    t = np.asarray(t)
    grad = np.zeros_like(upsilon)
    ctl = np.flatnonzero(t == 0)
    total, skipped = 0.0, 0
    for arm in range(1, n_arms):
        idx = np.flatnonzero(t == arm)
        if len(ctl) == 0 or len(idx) == 0:
            skipped += 1
            continue
        d, g0, g1 = sinkhorn_with_grad(upsilon[ctl], upsilon[idx], reg, iters, canonical=False)
        total += d
        grad[ctl] += g0
        grad[idx] += g1
    if skipped:
        log.debug("imbalance: %d arm(s) skipped for lack of samples", skipped)
    return total, grad, skipped


def loss_ate(preds, t, y, n_arms: int):
    """Mean over treated arms of |predicted - observed| group-mean ATE."""
    preds = np.asarray(preds, dtype=np.float64)
    t = np.asarray(t)
    y = np.asarray(y, dtype=np.float64)
    grad = np.zeros_like(preds)
    ctl = t == 0
    total, skipped = 0.0, 0
    n_t = n_arms - 1
    for arm in range(1, n_arms):
        sel = t == arm
        if not ctl.any() or not sel.any():
            skipped += 1
            continue
        est = preds[sel, arm].mean() - preds[ctl, 0].mean()
        obs = y[sel].mean() - y[ctl].mean()
        diff = est - obs
        total += abs(diff)
        s = np.sign(diff) / n_t
        grad[sel, arm] += s / sel.sum()
        grad[ctl, 0] -= s / ctl.sum()
    if skipped:
        log.debug("ATE loss: %d arm(s) skipped for lack of samples", skipped)
    return float(total) / n_t, grad, skipped


def loss_mono(preds):
    """(1/N) sum_i sum_t ReLU(p_{t-1} - p_t)."""
    preds = np.asarray(preds, dtype=np.float64)
    gap = preds[:, :-1] - preds[:, 1:]
    active = gap > 0
    n = len(preds)
    grad = np.zeros_like(preds)
    grad[:, :-1] += active / n
    grad[:, 1:] -= active / n
    return float(np.sum(gap * active) / n), grad


def loss_reg(model: DrcfrModel) -> float:
    return float(sum(np.sum(v * v) for s in model.stores()
                     for name, v in s.params.items() if name.startswith("W")))


def _add_reg_grad(model: DrcfrModel, coef: float) -> None:
    for s in model.stores():
        for name, v in s.params.items():
            if name.startswith("W"):
                s.grads[name] += 2.0 * coef * v


def loss_base(model: DrcfrModel, batch: ObservationBatch, arm_freq, weights: dict | None = None,
              sample_weights=None, backward: bool = True) -> tuple[float, dict]:
    """Composite DR-CFR objective on one batch.

    ``weights`` maps component names (fac, ce, prop, im, ate, mono, reg) to
    coefficients and defaults to the config. Importance weights are treated
    as constants; pass ``sample_weights`` to pin them. When ``backward`` is
    set, gradients are accumulated into the model (not zeroed first).
    """
    cfg = model.config
    coef = cfg.loss_weights() if weights is None else {**{k: 0.0 for k in cfg.loss_weights()}, **weights}
    fp = model.forward(batch.x, train=True)
    t, y = batch.t, batch.y
    rows = np.arange(len(t))
    if sample_weights is None:
        sample_weights = reweight(fp.prop, t, arm_freq)

    comp = {}
    g_preds = np.zeros_like(fp.preds)
    comp["fac"], g_fac = loss_factual(y, fp.preds[rows, t], sample_weights)
    g_preds[rows, t] += coef["fac"] * g_fac
    comp["ce"], g_clf = loss_ce(fp.clf, t)
    comp["prop"], g_prop = loss_ce(fp.prop, t)
    if coef["im"] > 0:
        comp["im"], g_ups, skip_im = loss_imbalance(
            fp.rep["upsilon"], t, cfg.n_arms, cfg.sinkhorn_reg, cfg.sinkhorn_iters)
    else:
        comp["im"], g_ups, skip_im = 0.0, None, 0
    comp["ate"], g_ate, skip_ate = loss_ate(fp.preds, t, y, cfg.n_arms)
    g_preds += coef["ate"] * g_ate
    comp["mono"], g_mono = loss_mono(fp.preds)
    g_preds += coef["mono"] * g_mono
    comp["reg"] = loss_reg(model) if coef["reg"] > 0 else 0.0
    total = sum(coef[k] * comp[k] for k in coef)
    comp["skipped_arms"] = skip_im + skip_ate
    if backward:
        model.backward(
            fp,
            g_preds=g_preds,
            g_prop=coef["prop"] * g_prop if coef["prop"] else None,
            g_clf=coef["ce"] * g_clf if coef["ce"] else None,
            g_upsilon=coef["im"] * g_ups if g_ups is not None else None,
        )
        if coef["reg"]:
            _add_reg_grad(model, coef["reg"])
    return float(total), comp


@dataclass
class TrainResult:
    model: DrcfrModel
    history: list[dict] = field(default_factory=list)


def minibatches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train(model: DrcfrModel, batch: ObservationBatch, epochs: int | None = None, lr: float | None = None,
          seed=None, batch_size: int | None = None) -> TrainResult:
    """Minibatch Adam on the composite loss. Mutates and returns ``model``.

    History holds one entry per epoch with the sample-weighted mean of each
    loss component.
    """
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    seed = cfg.seed if seed is None else seed
    batch_size = cfg.batch_size if batch_size is None else batch_size
    if len(batch) == 0:
        raise ValueError("empty training batch")
    arm_freq = arm_frequencies(batch.t, cfg.n_arms)
    adam = AdamState(model.stores())
    history = []
    for epoch in range(epochs):
        rng = np.random.default_rng([int(seed), epoch, 7])
        sums: dict[str, float] = {}
        for idx in minibatches(len(batch), batch_size, rng):
            model.zero_grad()
            total, comp = loss_base(model, batch.subset(idx), arm_freq)
            if not np.isfinite(total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}: {comp}")
            adam_step(model.stores(), adam, lr)
            model.commit_stats()
            comp["total"] = total
            for k, v in comp.items():
                sums[k] = sums.get(k, 0.0) + v * (len(idx) if k != "skipped_arms" else 1)
        history.append({k: (v / len(batch) if k != "skipped_arms" else v) for k, v in sums.items()})
    return TrainResult(model, history)


def with_overrides(config: DrcfrConfig, **kw) -> DrcfrConfig:
    return replace(config, **kw)

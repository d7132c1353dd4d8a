"""Small deterministic neural-network engine.

Dense layers (optionally batch-normalised before each hidden activation)
with a recorded tape for reverse-mode gradients, Xavier initialisation, Adam, an unrolled entropic Sinkhorn distance with an exact
backward pass, and the Bernoulli KL divergence. Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_PROB = 1e-7
BN_EPS = 1e-3

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "tanh", "softmax")


@dataclass(frozen=True)
class MlpSpec:
    """Network shape. ``layer_widths`` includes the input width, so
    ``(2, 20, 3)`` is one hidden layer of 20 units. With ``batch_norm`` each
    hidden pre-activation is normalised and gets a learned scale and shift."""

    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    batch_norm: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least one layer (two widths)")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    def normalised(self, i: int) -> bool:
        return self.batch_norm and i < self.n_layers - 1

    def n_params(self) -> int:
        w = self.layer_widths
        n = sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))
        return n + sum(2 * w[i + 1] for i in range(self.n_layers) if self.normalised(i))

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "batch_norm": self.batch_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), d["hidden_activation"], d["output_activation"],
                   bool(d.get("batch_norm", False)))


class ParamStore:
    """Named parameter arrays with parallel gradient accumulators.

    ``stats`` holds non-trainable running statistics (batch-norm moments);
    they are copied and compared but never seen by the optimizer.
    """

    def __init__(self, params: dict[str, np.ndarray], stats: dict[str, np.ndarray] | None = None):
        self.params = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.stats = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in (stats or {}).items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.stats.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise ValueError(f"expected {self.n_params()} values, got {flat.size}")
        pos = 0
        for v in self.params.values():
            v[...] = flat[pos:pos + v.size].reshape(v.shape)
            pos += v.size

    def stats_flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.stats.values()]) if self.stats else np.zeros(0)

    def set_stats_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        n = sum(v.size for v in self.stats.values())
        if flat.size != n:
            raise ValueError(f"expected {n} statistics, got {flat.size}")
        pos = 0
        for v in self.stats.values():
            v[...] = flat[pos:pos + v.size].reshape(v.shape)
            pos += v.size

    def equals(self, other: "ParamStore") -> bool:
        if self.params.keys() != other.params.keys() or self.stats.keys() != other.stats.keys():
            return False
        return (all(np.array_equal(v, other.params[k]) for k, v in self.params.items())
                and all(np.array_equal(v, other.stats[k]) for k, v in self.stats.items()))


def xavier_init(spec: MlpSpec, seed, scale_last: float = 1.0) -> ParamStore:
    """Xavier-normal weights (variance 2/(fan_in+fan_out)) and zero biases.

    Batch-norm scales start at 1, shifts at 0, running moments at (0, 1).
    ``seed`` may be anything ``np.random.default_rng`` accepts.
    """
    rng = np.random.default_rng(seed)
    params, stats = {}, {}
    w = spec.layer_widths
    for i in range(spec.n_layers):
        std = np.sqrt(2.0 / (w[i] + w[i + 1]))
        W = rng.normal(0.0, std, size=(w[i], w[i + 1]))
        if i == spec.n_layers - 1:
            W *= scale_last
        params[f"W{i}"] = W
        params[f"b{i}"] = np.zeros(w[i + 1])
        if spec.normalised(i):
            params[f"g{i}"] = np.ones(w[i + 1])
            params[f"s{i}"] = np.zeros(w[i + 1])
            stats[f"mean{i}"] = np.zeros(w[i + 1])
            stats[f"var{i}"] = np.ones(w[i + 1])
    return ParamStore(params, stats)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if kind == "softmax":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    raise ValueError(kind)


def _activate_backward(z: np.ndarray, a: np.ndarray, g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return g
    if kind == "relu":
        return g * (z > 0.0)
    if kind == "tanh":
        return g * (1.0 - a * a)
    if kind == "sigmoid":
        return g * a * (1.0 - a)
    if kind == "softmax":
        return a * (g - np.sum(g * a, axis=1, keepdims=True))
    raise ValueError(kind)


@dataclass
class Tape:
    spec: MlpSpec
    params: ParamStore
    train: bool = False
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    # per normalised layer: (normalised values, 1/sd, batch mean, batch var)
    norm: dict = field(default_factory=dict)


def mlp_forward(spec: MlpSpec, params: ParamStore, x: np.ndarray,
                train: bool = False) -> tuple[np.ndarray, Tape]:
    """Forward pass. ``train`` normalises with batch moments, otherwise the
    running moments are used; it has no effect without batch norm."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ValueError(f"input shape {x.shape} does not match input width {spec.n_in}")
    tape = Tape(spec, params, train)
    h = x
    for i in range(spec.n_layers):
        tape.inputs.append(h)
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        if spec.normalised(i):
            if train:
                mean, var = z.mean(axis=0), z.var(axis=0)
            else:
                mean, var = params.stats[f"mean{i}"], params.stats[f"var{i}"]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            zn = (z - mean) * inv
            tape.norm[i] = (zn, inv, mean, var)
            z = zn * params[f"g{i}"] + params[f"s{i}"]
        kind = spec.output_activation if i == spec.n_layers - 1 else spec.hidden_activation
        h = _activate(z, kind)
        tape.pre.append(z)
        tape.post.append(h)
    return h, tape


def commit_batch_stats(tape: Tape, momentum: float) -> None:
    """Fold the batch moments of a training-mode pass into the running moments."""
    if not tape.train:
        return
    stats = tape.params.stats
    for i, (_, _, mean, var) in tape.norm.items():
        stats[f"mean{i}"] *= momentum
        stats[f"mean{i}"] += (1.0 - momentum) * mean
        stats[f"var{i}"] *= momentum
        stats[f"var{i}"] += (1.0 - momentum) * var


def mlp_backward(tape: Tape, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients and return the gradient w.r.t. the input."""
    spec, params = tape.spec, tape.params
    if not tape.pre or len(tape.pre) != spec.n_layers:
        raise ValueError("tape does not come from a forward pass of this network")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != tape.post[-1].shape:
        raise ValueError(f"output gradient shape {g.shape} != {tape.post[-1].shape}")
    for i in reversed(range(spec.n_layers)):
        kind = spec.output_activation if i == spec.n_layers - 1 else spec.hidden_activation
        gz = _activate_backward(tape.pre[i], tape.post[i], g, kind)
        if i in tape.norm:
            zn, inv, _, _ = tape.norm[i]
            params.grads[f"g{i}"] += np.sum(gz * zn, axis=0)
            params.grads[f"s{i}"] += gz.sum(axis=0)
            gn = gz * params[f"g{i}"]
            if tape.train:
                n = gn.shape[0]
                gz = inv / n * (n * gn - gn.sum(axis=0) - zn * np.sum(gn * zn, axis=0))
            else:
                gz = gn * inv
        params.grads[f"W{i}"] += tape.inputs[i].T @ gz
        params.grads[f"b{i}"] += gz.sum(axis=0)
        g = gz @ params[f"W{i}"].T
    return g


class AdamState:
    """First/second moments for a fixed list of parameter stores."""

    def __init__(self, stores: list[ParamStore], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.m = [{k: np.zeros_like(v) for k, v in s.params.items()} for s in stores]
        self.v = [{k: np.zeros_like(v) for k, v in s.params.items()} for s in stores]


def adam_step(stores: list[ParamStore], state: AdamState, lr: float) -> None:
    for s in stores:
        for name, g in s.grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for s, m, v in zip(stores, state.m, state.v):
        for name, p in s.params.items():
            g = s.grads[name]
            m[name] *= b1
            m[name] += (1.0 - b1) * g
            v[name] *= b2
            v[name] += (1.0 - b2) * g * g
            p -= lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + state.eps)


def _canonical_pair(a: np.ndarray, b: np.ndarray) -> bool:
    """True when (a, b) must be swapped so that the computation is order-free."""
    ka, kb = (a.shape[0], a.tobytes()), (b.shape[0], b.tobytes())
    return kb < ka


def sinkhorn_with_grad(a, b, reg: float = 0.1, iters: int = 50, canonical: bool = True):
    """Entropic OT transport cost between two uniform point clouds.

    Squared-Euclidean ground cost; the entropic strength is ``reg`` times the
    mean pairwise cost. Returns ``(cost, grad_a, grad_b)`` where the gradients
    are exact for the unrolled ``iters`` scaling iterations.

    ``canonical`` orders the pair before computing so the result is exactly
    symmetric. The ordering can flip under a tiny perturbation, so training
    losses pass ``canonical=False`` to stay smooth in their inputs.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("sinkhorn_distance needs two non-empty 2-D point sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column mismatch: {a.shape[1]} vs {b.shape[1]}")
    if canonical and _canonical_pair(a, b):
        cost, gb, ga = _sinkhorn_core(b, a, reg, iters)
        return cost, ga, gb
    return _sinkhorn_core(a, b, reg, iters)


def sinkhorn_distance(a, b, reg: float = 0.1, iters: int = 50) -> float:
    return sinkhorn_with_grad(a, b, reg, iters)[0]


def _sinkhorn_core(a, b, reg, iters):
    n, m = a.shape[0], b.shape[0]
    diff = a[:, None, :] - b[None, :, :]
    C = np.einsum("ijk,ijk->ij", diff, diff)
    mean_c = C.mean()
    if mean_c <= 0.0:
        return 0.0, np.zeros_like(a), np.zeros_like(b)
    eps = reg * mean_c
    K = np.exp(np.maximum(-C / eps, -700.0))
    mu, nu = 1.0 / n, 1.0 / m
    us, vs = [], [np.ones(m)]
    v = vs[0]
    for _ in range(iters):
        u = mu / (K @ v)
        v = nu / (K.T @ u)
        us.append(u)
        vs.append(v)
    KC = K * C
    cost = float(u @ KC @ v)

    # reverse pass through the unrolled iterations
    gK = np.outer(u, v) * C
    gC = np.outer(u, v) * K
    gu = KC @ v
    gv = KC.T @ u
    U_z, G_z, G_y, V_y = [], [], [], []
    for l in range(iters, 0, -1):
        u_l, v_l, v_prev = us[l - 1], vs[l], vs[l - 1]
        gz = -gv * v_l * v_l / nu
        U_z.append(u_l)
        G_z.append(gz)
        gu = gu + K @ gz
        gy = -gu * u_l * u_l / mu
        G_y.append(gy)
        V_y.append(v_prev)
        gv = K.T @ gy
        gu = np.zeros(n)
    gK += np.asarray(U_z).T @ np.asarray(G_z)
    gK += np.asarray(G_y).T @ np.asarray(V_y)
    gKK = gK * K
    gC += -gKK / eps
    g_eps = float(np.sum(gKK * C)) / (eps * eps)
    gC += g_eps * reg / (n * m)
    ga = 2.0 * (a * gC.sum(axis=1)[:, None] - gC @ b)
    gb = 2.0 * (b * gC.sum(axis=0)[:, None] - gC.T @ a)
    return cost, ga, gb


def clamp_prob(p):
    return np.clip(p, EPS_PROB, 1.0 - EPS_PROB)


def kl_bernoulli(p, q):
    """Elementwise KL(Bern(p) || Bern(q)) after clamping both arguments."""
    p = clamp_prob(np.asarray(p, dtype=np.float64))
    q = clamp_prob(np.asarray(q, dtype=np.float64))
    out = p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))
    return np.maximum(out, 0.0) if out.ndim else max(float(out), 0.0)


def kl_bernoulli_grads(p, q):
    """Partial derivatives of the clamped KL w.r.t. p and q (zero where clamped)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pc, qc = clamp_prob(p), clamp_prob(q)
    dp = np.log(pc / qc) - np.log((1.0 - pc) / (1.0 - qc))
    dq = -pc / qc + (1.0 - pc) / (1.0 - qc)
    dp = np.where((p > EPS_PROB) & (p < 1.0 - EPS_PROB), dp, 0.0)
    dq = np.where((q > EPS_PROB) & (q < 1.0 - EPS_PROB), dq, 0.0)
    return dp, dq

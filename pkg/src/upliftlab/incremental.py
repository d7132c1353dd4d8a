"""Incremental training with parameter inheritance, a replay buffer and
proxy-teacher distillation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import ObservationBatch
from .metrics import ras_aucc
from .model import (
    CheckpointError,
    DrcfrConfig,
    DrcfrModel,
    arm_frequencies,
    derive_seed,
    loss_base,
    minibatches,
    train,
)
from .numerics import (
    EPS_PROB,
    AdamState,
    MlpSpec,
    ParamStore,
    adam_step,
    clamp_prob,
    kl_bernoulli,
    kl_bernoulli_grads,
    mlp_backward,
    mlp_forward,
    xavier_init,
)

log = logging.getLogger(__name__)

BUFFER_FORMAT = "upliftlab.replay"
BUFFER_VERSION = 1
MANIFEST_FORMAT = "upliftlab.stage"

# stream tags for np.random.default_rng seed sequences
_TAG_REPLAY, _TAG_SPLIT, _TAG_CORRECTOR, _TAG_EPOCH, _TAG_INIT = 101, 102, 103, 104, 105


@dataclass
class IcepkdConfig:
    mu: float = 1.0
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 256
    restarts: int = 5
    val_frac: float = 0.2
    corrector_hidden: tuple[int, ...] = (20, 20)
    use_proxy: bool = True
    use_replay: bool = True
    use_kd: bool = True
    seed: int = 0

    def __post_init__(self):
        self.corrector_hidden = tuple(int(v) for v in self.corrector_hidden)
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


# -- replay buffer ----------------------------------------------------------------

@dataclass
class ReplayBuffer:
    samples: ObservationBatch
    n_save: int
    n_seen: int  # cumulative sample counter

    def __len__(self) -> int:
        return len(self.samples)

    def equals(self, other: "ReplayBuffer") -> bool:
        return (self.n_save == other.n_save and self.n_seen == other.n_seen
                and self.samples.equals(other.samples))

    def to_dict(self) -> dict:
        s = self.samples
        return {
            "format": BUFFER_FORMAT,
            "version": BUFFER_VERSION,
            "n_save": self.n_save,
            "n_seen": self.n_seen,
            "x": s.x.tolist(),
            "t": s.t.tolist(),
            "y": s.y.tolist(),
            "true_probs": None if s.true_probs is None else s.true_probs.tolist(),
            "period": s.period,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReplayBuffer":
        if d.get("format") != BUFFER_FORMAT:
            raise CheckpointError(f"not a replay buffer (format={d.get('format')!r})")
        if d.get("version") != BUFFER_VERSION:
            raise CheckpointError(f"unsupported buffer version {d.get('version')!r}")
        batch = ObservationBatch(
            np.asarray(d["x"], dtype=np.float64),
            np.asarray(d["t"], dtype=np.int64),
            np.asarray(d["y"], dtype=np.float64),
            None if d["true_probs"] is None else np.asarray(d["true_probs"], dtype=np.float64),
            d["period"],
        )
        return cls(batch, int(d["n_save"]), int(d["n_seen"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: corrupt buffer ({exc!r})") from None


def replay_split(n_save: int, n_seen_prev: int, n_new: int) -> tuple[int, int]:
    """Rows kept from the old buffer and drawn from the new increment."""
    total = n_seen_prev + n_new
    n_r = (n_save * n_seen_prev) // total
    n_d = -((-n_save * n_new) // total)
    return n_r, n_d


def init_replay(d0: ObservationBatch, seed=0) -> ReplayBuffer:
    n0 = len(d0)
    if n0 < 100:
        raise ValueError(f"initial dataset has {n0} rows; at least 100 are needed")
    n_save = n0 // 100
    rng = np.random.default_rng([int(seed), 0, _TAG_REPLAY])
    idx = rng.permutation(n0)[:n_save]
    return ReplayBuffer(d0.subset(idx), n_save, n0)


def update_replay(prev: ReplayBuffer, d_k: ObservationBatch, seed=0, k: int = 1) -> ReplayBuffer:
    n_r, n_d = replay_split(prev.n_save, prev.n_seen, len(d_k))
    rng = np.random.default_rng([int(seed), int(k), _TAG_REPLAY])
    keep = rng.permutation(len(prev))[:n_r]
    parts = [prev.samples.subset(keep)]
    if n_d:
        parts.append(d_k.subset(rng.permutation(len(d_k))[:n_d]))
    return ReplayBuffer(ObservationBatch.concat(parts), prev.n_save, prev.n_seen + len(d_k))


# -- distillation ---------------------------------------------------------------------

@dataclass
class Corrector:
    spec: MlpSpec
    params: ParamStore

    @classmethod
    def create(cls, n_in: int, n_arms: int, hidden=(20, 20), seed=0) -> "Corrector":
        spec = MlpSpec((n_in, *hidden, n_arms), "relu", "tanh")
        return cls(spec, xavier_init(spec, seed, scale_last=0.01))

    def __call__(self, x) -> np.ndarray:
        return mlp_forward(self.spec, self.params, np.asarray(x, dtype=np.float64))[0]


def _distill_terms(target, student_preds):
    """(1/N) sum_i sum_t KL(target || student) with gradients for both sides."""
    n = len(student_preds)
    value = float(np.sum(kl_bernoulli(target, student_preds)) / n)
    g_target, g_student = kl_bernoulli_grads(target, student_preds)
    return value, g_target / n, g_student / n


def kd_loss(teacher: DrcfrModel, student: DrcfrModel, x) -> float:
    return _distill_terms(teacher.predict_all(x), student.forward(x).preds)[0]


def proxy_target(teacher_preds, correction):
    return clamp_prob(np.asarray(teacher_preds) + correction)


def proxy_kd_loss(teacher: DrcfrModel, corrector: Corrector, student: DrcfrModel, x) -> float:
    target = proxy_target(teacher.predict_all(x), corrector(x))
    return _distill_terms(target, student.forward(x).preds)[0]


def distill_backward(student: DrcfrModel, teacher_preds, x, corrector: Corrector | None = None,
                     weight: float = 1.0) -> float:
    """Distillation loss on ``x`` with gradients accumulated into the student
    (scaled by ``weight``) and, if given, the corrector (unscaled).

    The teacher enters only through its precomputed predictions. The student
    runs in training mode, like the base loss.
    """
    fp = student.forward(x, train=True)
    if corrector is None:
        value, _, g_s = _distill_terms(teacher_preds, fp.preds)
    else:
        h, tape = mlp_forward(corrector.spec, corrector.params, np.asarray(x, dtype=np.float64))
        raw = teacher_preds + h
        value, g_t, g_s = _distill_terms(clamp_prob(raw), fp.preds)
        inside = (raw > EPS_PROB) & (raw < 1.0 - EPS_PROB)
        mlp_backward(tape, np.where(inside, g_t, 0.0))
    student.backward(fp, g_preds=weight * g_s)
    return value


# -- stages -----------------------------------------------------------------------------

@dataclass
class StageState:
    model: DrcfrModel
    buffer: ReplayBuffer
    k: int = 0


@dataclass
class StageResult:
    state: StageState
    n_replay: int
    n_new: int
    history: list[dict] = field(default_factory=list)


@dataclass
class SelectionResult:
    model: DrcfrModel
    scores: list[float]
    best: int


def select_initial_model(d0: ObservationBatch, model_config: DrcfrConfig, restarts: int = 5,
                         seed: int = 0, val_frac: float = 0.2) -> SelectionResult:
    """Train ``restarts`` models on a split of ``d0`` and keep the one with the
    best validation RAS-AUCC (ties go to the earlier restart)."""
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    rng = np.random.default_rng([int(seed), 0, _TAG_SPLIT])
    perm = rng.permutation(len(d0))
    n_val = int(round(val_frac * len(d0)))
    val, fit = d0.subset(perm[:n_val]), d0.subset(perm[n_val:])
    best, best_model, scores = -1, None, []
    for r in range(restarts):
        s = derive_seed(seed, r, _TAG_INIT)
        m = train(DrcfrModel(model_config, seed=s), fit, seed=s).model
        try:
            score = ras_aucc(m.predict_all(val.x), val)
        except (ZeroDivisionError, ValueError):
            score = float("nan")
        if not math.isfinite(score):
            score = float("-inf")
        scores.append(score)
        if best < 0 or score > scores[best]:
            best, best_model = r, m
    log.info("initial selection: scores=%s best=%d", scores, best)
    return SelectionResult(best_model, scores, best)


def start_stream(d0: ObservationBatch, model_config: DrcfrConfig, cfg: IcepkdConfig) -> StageState:
    sel = select_initial_model(d0, model_config, cfg.restarts, cfg.seed, cfg.val_frac)
    return StageState(sel.model, init_replay(d0, cfg.seed), 0)


def incremental_stage(prev: StageState, d_k: ObservationBatch, cfg: IcepkdConfig,
                      callback=None) -> StageResult:
    """One stage: inherit, distil on the previous buffer, then refresh it.

    ``callback(step, student, teacher)`` runs before every optimizer step.
    """
    if len(d_k) == 0:
        raise ValueError("empty incremental dataset")
    k = prev.k + 1
    teacher = prev.model
    student = teacher.copy()
    mc = student.config
    distil = cfg.use_kd and cfg.mu > 0
    proxy = distil and cfg.use_proxy
    corrector = Corrector.create(mc.n_in, mc.n_arms, cfg.corrector_hidden,
                                 seed=[int(cfg.seed), k, _TAG_CORRECTOR]) if proxy else None
    source = prev.buffer.samples if cfg.use_replay else d_k
    teacher_preds = teacher.predict_all(source.x) if distil else None
    arm_freq = arm_frequencies(d_k.t, mc.n_arms)
    opt = AdamState(student.stores())
    opt_c = AdamState([corrector.params]) if proxy else None
    history, step = [], 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([int(cfg.seed), k, epoch, _TAG_EPOCH])
        batches = minibatches(len(d_k), cfg.batch_size, rng)
        if cfg.use_replay:
            chunks = np.array_split(rng.permutation(len(source)), len(batches))
        else:
            chunks = batches
        sums = {"base": 0.0, "distill": 0.0}
        for idx, ridx in zip(batches, chunks):
            student.zero_grad()
            base, _ = loss_base(student, d_k.subset(idx), arm_freq)
            dist = 0.0
            if distil and len(ridx):
                if proxy:
                    corrector.params.zero_grad()
                dist = distill_backward(student, teacher_preds[ridx], source.x[ridx], corrector, cfg.mu)
            if not (np.isfinite(base) and np.isfinite(dist)):
                raise FloatingPointError(f"non-finite loss in stage {k}, epoch {epoch}")
            if callback is not None:
                callback(step, student, teacher)
            adam_step(student.stores(), opt, cfg.lr)
            student.commit_stats()
            if proxy and len(ridx):
                adam_step([corrector.params], opt_c, cfg.lr)
            sums["base"] += base * len(idx)
            sums["distill"] += dist * len(ridx)
            step += 1
        history.append({"base": sums["base"] / len(d_k),
                        "distill": sums["distill"] / len(source) if distil else 0.0})
    n_r, n_d = replay_split(prev.buffer.n_save, prev.buffer.n_seen, len(d_k))
    buffer = update_replay(prev.buffer, d_k, cfg.seed, k)
    return StageResult(StageState(student, buffer, k), n_r, n_d, history)


def stage_manifest(res: StageResult, checkpoint: str | None, buffer_path: str | None) -> dict:
    st = res.state
    return {
        "format": MANIFEST_FORMAT,
        "stage": st.k,
        "n_seen": st.buffer.n_seen,
        "n_save": st.buffer.n_save,
        "n_replay": res.n_replay,
        "n_new": res.n_new,
        "history": res.history,
        "checkpoint": checkpoint,
        "buffer": buffer_path,
    }


def run_stream(initial: StageState, increments: list[ObservationBatch], cfg: IcepkdConfig,
               out_dir=None) -> list[StageResult]:
    """Apply ``incremental_stage`` to each increment in order.

    With ``out_dir`` set, each stage writes ``stage_k.model.json``,
    ``stage_k.buffer.json`` and ``stage_k.manifest.json``.
    """
    if not increments:
        raise ValueError("no increments to process")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results, state = [], initial
    for d_k in increments:
        res = incremental_stage(state, d_k, cfg)
        state = res.state
        if out is not None:
            stem = f"stage_{state.k}"
            ckpt, buf = out / f"{stem}.model.json", out / f"{stem}.buffer.json"
            state.model.save(ckpt)
            state.buffer.save(buf)
            manifest = stage_manifest(res, ckpt.name, buf.name)
            (out / f"{stem}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        results.append(res)
    return results


def config_dict(cfg: IcepkdConfig) -> dict:
    d = asdict(cfg)
    d["corrector_hidden"] = list(cfg.corrector_hidden)
    return d

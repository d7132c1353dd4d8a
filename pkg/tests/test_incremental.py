import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_grad
from upliftlab.datagen import gen_period
from upliftlab.incremental import (
    Corrector,
    IcepkdConfig,
    ReplayBuffer,
    StageState,
    _distill_terms,
    distill_backward,
    incremental_stage,
    init_replay,
    kd_loss,
    proxy_kd_loss,
    proxy_target,
    replay_split,
    run_stream,
    select_initial_model,
    update_replay,
)
from upliftlab.model import (
    CheckpointError,
    DrcfrConfig,
    DrcfrModel,
    arm_frequencies,
    loss_base,
    minibatches,
)
from upliftlab.numerics import EPS_PROB, AdamState, adam_step

TINY = DrcfrConfig(rep_hidden=(6, 6), prop_hidden=(6,), clf_hidden=(6,), trunk_hidden=(6, 6),
                   head_hidden=(6,), epochs=2)


@pytest.fixture(scope="module")
def stream():
    return [gen_period(k, 1000, 10, seed=0).train for k in range(3)]


def small_state(d0, seed=0):
    model = DrcfrModel(TINY, seed=seed)
    return StageState(model, init_replay(d0, seed), 0)


# -- replay arithmetic -------------------------------------------------------------

def test_replay_split_example():
    assert replay_split(1000, 100_000, 14_000) == (877, 123)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 5000), st.integers(100, 10**7), st.integers(0, 10**6))
def test_replay_split_always_fills_capacity(n_save, seen, new):
    n_r, n_d = replay_split(n_save, seen, new)
    assert n_r + n_d == n_save
    assert n_r == (n_save * seen) // (seen + new)
    assert 0 <= n_r <= n_save and 0 <= n_d <= n_save


def test_init_replay_sizes_and_distinct_rows():
    d0 = gen_period(0, 10_000, 10, seed=0).train
    buf = init_replay(d0, seed=3)
    assert buf.n_save == 100 and len(buf) == 100 and buf.n_seen == 10_000
    assert len(np.unique(buf.samples.x, axis=0)) == 100
    big = gen_period(0, 100_000, 10, seed=0).train
    assert init_replay(big).n_save == 1000
    with pytest.raises(ValueError):
        init_replay(d0.subset(np.arange(99)))


def test_update_replay_composition(stream):
    buf = init_replay(stream[0], seed=1)
    new = update_replay(buf, stream[1], seed=1, k=1)
    n_r, n_d = replay_split(buf.n_save, buf.n_seen, len(stream[1]))
    assert (n_r, n_d) == (5, 5)
    assert len(new) == buf.n_save and new.n_seen == 2000
    old_rows = {tuple(r) for r in buf.samples.x}
    new_rows = [tuple(r) for r in new.samples.x]
    assert sum(r in old_rows for r in new_rows) == n_r
    assert len(set(new_rows)) == len(new_rows)
    again = update_replay(buf, stream[1], seed=1, k=1)
    assert again.equals(new)


def test_update_replay_with_empty_increment(stream):
    buf = init_replay(stream[0], seed=1)
    new = update_replay(buf, stream[1].subset(np.arange(0)), seed=1)
    assert new.n_seen == buf.n_seen and len(new) == len(buf)
    assert sorted(map(tuple, new.samples.x)) == sorted(map(tuple, buf.samples.x))


def test_buffer_round_trip_and_errors(tmp_path, stream):
    buf = init_replay(stream[0])
    buf.save(tmp_path / "b.json")
    assert ReplayBuffer.load(tmp_path / "b.json").equals(buf)
    d = buf.to_dict()
    (tmp_path / "f.json").write_text(json.dumps({**d, "format": "x"}))
    with pytest.raises(CheckpointError, match="not a replay buffer"):
        ReplayBuffer.load(tmp_path / "f.json")
    (tmp_path / "v.json").write_text(json.dumps({**d, "version": 7}))
    with pytest.raises(CheckpointError, match="version"):
        ReplayBuffer.load(tmp_path / "v.json")
    (tmp_path / "c.json").write_text(json.dumps(d)[:50])
    with pytest.raises(CheckpointError, match="corrupt"):
        ReplayBuffer.load(tmp_path / "c.json")


# -- distillation ---------------------------------------------------------------------

def test_kd_reference_value():
    v, _, _ = _distill_terms(np.array([[0.8]]), np.array([[0.5]]))
    assert v == pytest.approx(0.19274, abs=1e-5)


def test_kd_zero_for_identical_models(rng):
    m = DrcfrModel(TINY, seed=1)
    assert kd_loss(m, m.copy(), rng.uniform(size=(20, 2))) == 0.0
    assert kd_loss(m, DrcfrModel(TINY, seed=2), rng.uniform(size=(20, 2))) > 0


def test_proxy_with_zero_corrector_equals_kd(rng):
    teacher, student = DrcfrModel(TINY, seed=1), DrcfrModel(TINY, seed=2)
    corr = Corrector.create(2, 3, seed=0)
    for v in corr.params.params.values():
        v[...] = 0.0
    x = rng.uniform(size=(25, 2))
    assert proxy_kd_loss(teacher, corr, student, x) == kd_loss(teacher, student, x)


def test_proxy_target_cases():
    v, _, _ = _distill_terms(proxy_target(np.array([[0.6]]), np.array([[0.2]])), np.array([[0.8]]))
    assert v == pytest.approx(0.0, abs=1e-12)
    target = proxy_target(np.array([[0.9]]), np.array([[0.5]]))
    assert target[0, 0] == 1.0 - EPS_PROB
    v, _, _ = _distill_terms(target, np.array([[0.3]]))
    assert np.isfinite(v) and v > 0


def test_corrector_starts_small(rng):
    corr = Corrector.create(2, 3, seed=5)
    h = corr(rng.uniform(size=(1000, 2)))
    assert h.shape == (1000, 3)
    assert np.all(np.abs(h) < 1) and np.mean(np.abs(h)) < 0.05
    assert np.mean(np.abs(Corrector.create(10, 3, seed=5)(rng.uniform(size=(1000, 10))))) < 0.05


def test_proxy_gradient_wrt_corrector(rng):
    teacher, student = DrcfrModel(TINY, seed=1), DrcfrModel(TINY, seed=2)
    corr = Corrector.create(2, 3, hidden=(5, 5), seed=3)
    corr.params.set_flat(corr.params.flat() + rng.normal(0, 0.2, corr.params.n_params()))
    x = rng.uniform(size=(20, 2))
    tp = teacher.predict_all(x)
    corr.params.zero_grad()
    distill_backward(student, tp, x, corr)
    an = corr.params.flat_grad()
    theta = corr.params.flat()

    def f(th):
        corr.params.set_flat(th)
        return _distill_terms(proxy_target(tp, corr(x)), student.forward(x, train=True).preds)[0]

    num = fd_grad(f, theta, range(theta.size))
    corr.params.set_flat(theta)
    assert np.abs(an - num).max() < 1e-4 * np.abs(num).max()


def test_distill_gradient_wrt_student(rng):
    teacher, student = DrcfrModel(TINY, seed=1), DrcfrModel(TINY, seed=2)
    x = rng.uniform(size=(20, 2))
    tp = teacher.predict_all(x)
    student.zero_grad()
    distill_backward(student, tp, x, None, weight=2.0)
    an = student.flat_grad()
    theta = student.flat()
    idx = rng.choice(theta.size, 120, replace=False)

    def f(th):
        student.set_flat(th)
        return 2.0 * _distill_terms(tp, student.forward(x, train=True).preds)[0]

    num = fd_grad(f, theta, idx)
    student.set_flat(theta)
    assert np.abs(an[idx] - num).max() < 1e-4 * np.abs(num).max()


# -- stages ----------------------------------------------------------------------------

def test_student_equals_teacher_before_first_step(stream):
    state = small_state(stream[0])
    seen = []

    def check(step, student, teacher):
        if step == 0:
            seen.append(student.equals(teacher) and student is not teacher)

    teacher_before = state.model.copy()
    cfg = IcepkdConfig(epochs=2, lr=1e-3)
    res = incremental_stage(state, stream[1], cfg, callback=check)
    assert seen == [True]
    assert state.model.equals(teacher_before)
    assert not res.state.model.equals(teacher_before)


def test_zero_epochs_keeps_parameters_and_updates_buffer(stream):
    state = small_state(stream[0])
    res = incremental_stage(state, stream[1], IcepkdConfig(epochs=0))
    assert res.state.model.equals(state.model)
    assert res.state.buffer.n_seen == 2000 and len(res.state.buffer) == 10
    assert not res.state.buffer.equals(state.buffer)


def _base_only_reference(state, d_k, cfg, k=1):
    student = state.model.copy()
    freq = arm_frequencies(d_k.t, 3)
    opt = AdamState(student.stores())
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, k, epoch, 104])
        for idx in minibatches(len(d_k), cfg.batch_size, rng):
            student.zero_grad()
            loss_base(student, d_k.subset(idx), freq)
            adam_step(student.stores(), opt, cfg.lr)
            student.commit_stats()
    return student


def test_mu_zero_is_base_training_alone(stream):
    state = small_state(stream[0])
    cfg = IcepkdConfig(mu=0.0, epochs=2, lr=1e-3, batch_size=300)
    ref = _base_only_reference(state, stream[1], cfg)
    assert incremental_stage(state, stream[1], cfg).state.model.equals(ref)
    no_kd = IcepkdConfig(use_kd=False, epochs=2, lr=1e-3, batch_size=300)
    assert incremental_stage(state, stream[1], no_kd).state.model.equals(ref)


def test_ablation_flags_change_the_trajectory(stream):
    state = small_state(stream[0])
    kw = dict(epochs=2, lr=1e-3, batch_size=300)
    models = [incremental_stage(state, stream[1], IcepkdConfig(**kw, **flags)).state.model
              for flags in ({}, {"use_proxy": False}, {"use_replay": False}, {"use_kd": False})]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not models[i].equals(models[j])


def test_stage_rejects_empty_increment(stream):
    with pytest.raises(ValueError):
        incremental_stage(small_state(stream[0]), stream[1].subset(np.arange(0)), IcepkdConfig())


def test_run_stream_counters_files_and_determinism(tmp_path, stream):
    cfg = IcepkdConfig(epochs=1, lr=1e-3)
    results = run_stream(small_state(stream[0]), stream[1:], cfg, tmp_path / "a")
    assert [r.state.k for r in results] == [1, 2]
    assert [r.state.buffer.n_seen for r in results] == [2000, 3000]
    assert all(len(r.state.buffer) == 10 for r in results)
    for k in (1, 2):
        man = json.loads((tmp_path / "a" / f"stage_{k}.manifest.json").read_text())
        assert man["stage"] == k and man["n_replay"] + man["n_new"] == 10
        m = DrcfrModel.load(tmp_path / "a" / man["checkpoint"])
        assert m.equals(results[k - 1].state.model)
        assert ReplayBuffer.load(tmp_path / "a" / man["buffer"]).equals(results[k - 1].state.buffer)
    run_stream(small_state(stream[0]), stream[1:], cfg, tmp_path / "b")
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    one = run_stream(small_state(stream[0]), stream[1:2], cfg)
    assert len(one) == 1
    with pytest.raises(ValueError):
        run_stream(small_state(stream[0]), [], cfg)


def test_select_initial_model(stream):
    cfg = DrcfrConfig(**{**TINY.to_dict(), "epochs": 1})
    sel = select_initial_model(stream[0], cfg, restarts=3, seed=4)
    assert len(sel.scores) == 3
    assert sel.scores[sel.best] == max(sel.scores)
    again = select_initial_model(stream[0], cfg, restarts=3, seed=4)
    assert again.model.equals(sel.model) and again.scores == sel.scores
    single = select_initial_model(stream[0], cfg, restarts=1, seed=4)
    assert single.best == 0 and single.model.equals(sel.model if sel.best == 0 else single.model)
    with pytest.raises(ValueError):
        select_initial_model(stream[0], cfg, restarts=0)


def test_config_validation():
    with pytest.raises(ValueError):
        IcepkdConfig(mu=-1)
    with pytest.raises(ValueError):
        IcepkdConfig(epochs=-1)
    with pytest.raises(ValueError):
        IcepkdConfig(restarts=0)

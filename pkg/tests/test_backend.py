import os
import subprocess
import sys

import numpy as np
import pytest

from upliftlab import _backend, _kernels_py
from upliftlab.datagen import gen_period
from upliftlab.metrics import CostModel, ras_aucc

compiled = pytest.importorskip("upliftlab._kernels", reason="compiled kernels not built")


def _inputs(seed, n=500):
    rng = np.random.default_rng(seed)
    preds = rng.uniform(0.05, 0.95, size=(n, 3))
    cost, reward = CostModel().expected_increments(preds)
    return cost, reward


def test_compiled_backend_is_selected():
    assert _backend.COMPILED


@pytest.mark.parametrize("seed", range(4))
def test_upgrade_chains_parity(seed):
    cost, reward = _inputs(seed)
    for a, b in zip(_kernels_py.upgrade_chains(cost, reward), compiled.upgrade_chains(cost, reward)):
        assert a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(4))
def test_ras_sweep_parity(seed):
    cost, reward = _inputs(seed)
    ind, to_arm, d_cost, _ = _kernels_py.upgrade_chains(cost, reward)
    order = np.random.default_rng(seed).permutation(len(ind))
    rng = np.random.default_rng(seed + 10)
    t = rng.integers(0, 3, len(cost))
    y = (rng.uniform(size=len(cost)) < 0.5).astype(float)
    c, r = CostModel().realized(t, y)
    budgets = np.linspace(0.0, d_cost.sum(), 30)
    args = (ind[order], to_arm[order], d_cost[order], len(cost), t, c, r, budgets)
    np.testing.assert_array_equal(_kernels_py.ras_sweep(*args), compiled.ras_sweep(*args))


def test_chains_handle_no_positive_upgrade():
    cost = np.array([[0.0, 1.0, 2.0], [0.0, 1.0, 2.0]])
    reward = np.array([[0.0, -0.1, -0.2], [0.0, 0.2, 0.1]])
    for k in (_kernels_py, compiled):
        ind, to_arm, _, _ = k.upgrade_chains(cost, reward)
        assert ind.tolist() == [1] and to_arm.tolist() == [1]


def test_pure_python_switch_gives_identical_metric():
    d = gen_period(2, 10, 3000, seed=0).test
    code = (
        "import numpy as np; from upliftlab import _backend; from upliftlab.datagen import gen_period;"
        "from upliftlab.metrics import ras_aucc;"
        "d = gen_period(2, 10, 3000, seed=0).test;"
        "print(_backend.COMPILED, repr(ras_aucc(d.true_probs, d)))"
    )
    env = {**os.environ, "UPLIFTLAB_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    flag, value = out.stdout.split()
    assert flag == "False"
    assert float(value) == ras_aucc(d.true_probs, d)

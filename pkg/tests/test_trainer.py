import json
import math
import os

import numpy as np
import pytest

from mergetest.agents import MLP, Level0Vut, QPolicy, policy_checksum
from mergetest.sim_core import ScenarioConfig
from mergetest.trainer import (
    ReplayBuffer,
    TrainerConfig,
    TrainingDiverged,
    _SgdMomentum,
    _q_learning_update,
    build_pov_library,
    ddqn_target,
    load_library,
    train_level_k_agent,
)


class ConstNet:
    """Stand-in network returning a fixed Q row for every input."""

    def __init__(self, row):
        self.row = np.asarray(row, dtype=float)

    def forward(self, x):
        return np.tile(self.row, (np.atleast_2d(x).shape[0], 1))


FAST = TrainerConfig(
    episodes=3,
    warmup_steps=16,
    minibatch_size=8,
    eps_decay_steps=200,
    hidden_sizes=(8,),
    seed=7,
)
SHORT = ScenarioConfig(x_vut0=-40.0, t_max=10.0)


# --- target computation ----------------------------------------------------


def test_ddqn_target_worked_example():
    # r=1, gamma=0.95, target net value at online argmax = 2 -> y = 2.9
    online = ConstNet([0.0, 5.0, 1.0])  # argmax = action 1
    target = ConstNet([9.0, 2.0, 9.0])  # evaluated at action 1 -> 2.0
    y = ddqn_target(
        np.array([1.0]), np.zeros((1, 4)), np.array([False]), online, target, 0.95
    )
    assert y[0] == pytest.approx(2.9)


def test_ddqn_target_terminal_is_reward_only():
    online = ConstNet([100.0, 100.0])
    target = ConstNet([100.0, 100.0])
    y = ddqn_target(
        np.array([-3.0, 2.0]),
        np.zeros((2, 4)),
        np.array([True, True]),
        online,
        target,
        0.95,
    )
    assert list(y) == [-3.0, 2.0]


def test_ddqn_target_uses_online_argmax_not_target_max():
    # online picks action 0; target's value there (1.0) is far below its max
    online = ConstNet([5.0, 0.0])
    target = ConstNet([1.0, 50.0])
    y = ddqn_target(
        np.array([0.0]), np.zeros((1, 4)), np.array([False]), online, target, 1.0
    )
    assert y[0] == pytest.approx(1.0)


def test_ddqn_target_mixed_batch():
    online = ConstNet([0.0, 1.0])
    target = ConstNet([0.0, 10.0])
    y = ddqn_target(
        np.array([1.0, 1.0]),
        np.zeros((2, 4)),
        np.array([True, False]),
        online,
        target,
        0.5,
    )
    assert y[0] == pytest.approx(1.0)
    assert y[1] == pytest.approx(1.0 + 0.5 * 10.0)


# --- replay buffer ---------------------------------------------------------


def test_replay_fifo_overwrite():
    buf = ReplayBuffer(capacity=3, input_dim=2)
    for i in range(5):
        buf.push(np.full(2, i), i, float(i), np.full(2, i + 10), False)
    assert buf.size == 3
    # entries 0 and 1 were overwritten by 3 and 4
    assert sorted(buf.actions.tolist()) == [2, 3, 4]


def test_replay_sample_within_live_region():
    buf = ReplayBuffer(capacity=100, input_dim=2)
    for i in range(10):
        buf.push(np.zeros(2), i, 0.0, np.zeros(2), False)
    rng = np.random.default_rng(0)
    _, a, _, _, _ = buf.sample(64, rng)
    assert np.all((0 <= a) & (a < 10))


# --- gradient step ---------------------------------------------------------


def test_q_update_reduces_loss_on_fixed_batch():
    rng = np.random.default_rng(0)
    net = MLP.init([4, 16, 3], rng)
    opt = _SgdMomentum(net, lr=1e-2, momentum=0.0, clip=1e9)
    x = rng.normal(size=(32, 4))
    a = rng.integers(3, size=32)
    y = rng.normal(size=32)
    losses = [_q_learning_update(net, opt, x, a, y) for _ in range(1000)]
    assert losses[-1] < 0.2 * losses[0]


def test_q_update_leaves_untaken_actions_mostly_alone():
    rng = np.random.default_rng(1)
    net = MLP.init([4, 8, 3], rng)
    opt = _SgdMomentum(net, lr=1e-3, momentum=0.0, clip=1e9)
    x = rng.normal(size=(8, 4))
    before = net.forward(x)
    a = np.zeros(8, dtype=int)
    _q_learning_update(net, opt, x, a, before[:, 0] + 1.0)
    after = net.forward(x)
    # the taken column moves toward the target more than the others move
    d_taken = np.abs(after[:, 0] - before[:, 0]).mean()
    d_other = np.abs(after[:, 1:] - before[:, 1:]).mean()
    assert d_taken > d_other


def test_grad_clip_limits_update_magnitude():
    rng = np.random.default_rng(2)
    net_a = MLP.init([4, 8, 3], rng)
    net_b = net_a.copy()
    x = rng.normal(size=(8, 4)) * 100
    a = rng.integers(3, size=8)
    y = rng.normal(size=8) * 1e6  # enormous targets -> enormous raw gradient
    opt_a = _SgdMomentum(net_a, lr=1e-3, momentum=0.0, clip=1.0)
    _q_learning_update(net_a, opt_a, x, a, y)
    step = math.sqrt(
        sum(float(np.sum((wa - wb) ** 2)) for wa, wb in zip(net_a.weights, net_b.weights))
        + sum(float(np.sum((ba - bb) ** 2)) for ba, bb in zip(net_a.biases, net_b.biases))
    )
    assert step <= 1e-3 * 1.0 + 1e-12  # lr * clip bound


# --- full training loop ----------------------------------------------------


def test_training_runs_and_returns_policy():
    policy, log = train_level_k_agent(
        "POV", 1, Level0Vut(), cfg=FAST, scenario=SHORT
    )
    assert isinstance(policy, QPolicy)
    assert policy.role == "POV" and policy.level == 1 and not policy.uses_psi
    assert len(log.episodes) == FAST.episodes
    assert all(math.isfinite(row[1]) for row in log.episodes)


def test_training_reproducible_bitwise():
    a, _ = train_level_k_agent("POV", 1, Level0Vut(), cfg=FAST, scenario=SHORT)
    b, _ = train_level_k_agent("POV", 1, Level0Vut(), cfg=FAST, scenario=SHORT)
    for wa, wb in zip(a.network.weights, b.network.weights):
        assert np.array_equal(wa, wb)
    for ba, bb in zip(a.network.biases, b.network.biases):
        assert np.array_equal(ba, bb)


def test_training_seed_changes_result():
    a, _ = train_level_k_agent("POV", 1, Level0Vut(), cfg=FAST, scenario=SHORT)
    other = TrainerConfig(**{**FAST.__dict__, "seed": 8})
    b, _ = train_level_k_agent("POV", 1, Level0Vut(), cfg=other, scenario=SHORT)
    assert any(
        not np.array_equal(wa, wb)
        for wa, wb in zip(a.network.weights, b.network.weights)
    )


def test_training_psi_conditioned_network_has_five_inputs():
    policy, _ = train_level_k_agent(
        "POV", 2, Level0Vut(), cfg=FAST, scenario=SHORT, uses_psi=True
    )
    assert policy.uses_psi
    assert policy.network.sizes[0] == 5


def test_training_interface_validation():
    with pytest.raises(ValueError):
        train_level_k_agent("EGO", 1, Level0Vut(), cfg=FAST)
    with pytest.raises(ValueError):
        train_level_k_agent("POV", 3, Level0Vut(), cfg=FAST)
    with pytest.raises(ValueError):
        train_level_k_agent("VUT", 2, Level0Vut(), cfg=FAST, uses_psi=True)


def test_training_divergence_aborts():
    bad = TrainerConfig(
        episodes=60,
        warmup_steps=8,
        minibatch_size=8,
        hidden_sizes=(8,),
        learning_rate=1e6,
        grad_clip=math.inf,
        reward_scale=1e-6,
        seed=0,
    )
    with pytest.raises(TrainingDiverged), np.errstate(all="ignore"):
        train_level_k_agent("POV", 1, Level0Vut(), cfg=bad, scenario=SHORT)


# --- library build/load ----------------------------------------------------


def fast_cfgs():
    return {
        "pov_level1": TrainerConfig(**{**FAST.__dict__, "seed": 1}),
        "vut_level1": TrainerConfig(**{**FAST.__dict__, "seed": 2}),
        "pov_level2": TrainerConfig(**{**FAST.__dict__, "seed": 3}),
    }


def test_build_library_files_and_manifest(tmp_path):
    manifest = build_pov_library(tmp_path, cfgs=fast_cfgs(), scenario=SHORT)
    assert set(manifest["policies"]) == {"pov_level1", "vut_level1", "pov_level2"}
    for name, entry in manifest["policies"].items():
        path = tmp_path / entry["path"]
        assert path.exists()
        assert policy_checksum(path) == entry["sha256"]
        assert (tmp_path / f"{name}_log.csv").exists()
    lib = load_library(tmp_path)
    assert set(lib) == {0, 1, 2}
    assert lib[2].uses_psi and not lib[1].uses_psi


def test_build_library_skips_valid_stages(tmp_path):
    build_pov_library(tmp_path, cfgs=fast_cfgs(), scenario=SHORT)
    mtimes = {p: os.path.getmtime(tmp_path / p) for p in os.listdir(tmp_path)}
    build_pov_library(tmp_path, cfgs=fast_cfgs(), scenario=SHORT)
    for p, t in mtimes.items():
        if p.endswith(".json") and p != "manifest.json":
            assert os.path.getmtime(tmp_path / p) == t


def test_load_library_detects_tampering(tmp_path):
    build_pov_library(tmp_path, cfgs=fast_cfgs(), scenario=SHORT)
    path = tmp_path / "pov_level1.json"
    data = json.loads(path.read_text())
    data["biases"][-1][0] += 1.0
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError):
        load_library(tmp_path)

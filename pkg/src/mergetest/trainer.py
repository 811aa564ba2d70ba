"""Double-DQN training of the level-1/level-2 agents.

The challenger library is built bottom-up: the naive level-0 profiles are
fixed, a level-k agent trains against the frozen level-(k-1) policy of the
opposite role, and the SVO-conditioned level-2 challenger takes the angle as
an extra network input held constant per episode.

The whole loop is single-threaded numpy with a fixed-seed RNG, so a given
config reproduces its loss trajectory bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import rewards as rw
from .agents import (
    MLP,
    BoundQPolicy,
    Level0Pov,
    Level0Vut,
    QPolicy,
    normalize_input,
    policy_checksum,
)
from .sim_core import (
    ACTION_SET,
    N_ACTIONS,
    ScenarioConfig,
    State,
    step_dynamics,
    compute_safety_features,
    Trajectory,
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.95
    replay_capacity: int = 50_000
    minibatch_size: int = 64
    target_sync_period: int = 1000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 40_000
    learning_rate: float = 1e-3
    momentum: float = 0.9
    grad_clip: float = 10.0
    episodes: int = 1200
    warmup_steps: int = 1000
    hidden_sizes: tuple = (64, 64)
    reward_scale: float = 100.0  # rewards divided by this before entering replay
    seed: int = 0
    # per-episode initial-condition ranges (mirrors the samplers pool)
    x_pov0_range: tuple = (-400.0, -150.0)
    v_pov0_range: tuple = (20.0, 35.0)
    psi_range: tuple = (0.0, math.pi / 2)

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.replay_capacity < self.minibatch_size:
            raise ValueError("replay capacity must cover one minibatch")


class ReplayBuffer:
    """Fixed-capacity FIFO transition store."""

    def __init__(self, capacity: int, input_dim: int):
        self.capacity = capacity
        self.inputs = np.zeros((capacity, input_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_inputs = np.zeros((capacity, input_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._head = 0

    def push(self, x, a, r, x_next, terminal):
        i = self._head
        self.inputs[i] = x
        self.actions[i] = a
        self.rewards[i] = r
        self.next_inputs[i] = x_next
        self.terminal[i] = terminal
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=n)
        return (
            self.inputs[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_inputs[idx],
            self.terminal[idx],
        )


def ddqn_target(
    r: np.ndarray,
    next_inputs: np.ndarray,
    terminal: np.ndarray,
    online: MLP,
    target: MLP,
    gamma: float,
) -> np.ndarray:
    """y = r, or r + gamma * Q_target(s', argmax_a Q_online(s', a))."""
    y = np.array(r, dtype=float)
    live = ~np.asarray(terminal, dtype=bool)
    if np.any(live):
        q_online = online.forward(next_inputs[live])
        best = np.argmax(q_online, axis=1)
        q_target = target.forward(next_inputs[live])
        y[live] = r[live] + gamma * q_target[np.arange(best.size), best]
    return y


class _SgdMomentum:
    def __init__(self, net: MLP, lr: float, momentum: float, clip: float):
        self.lr, self.momentum, self.clip = lr, momentum, clip
        self.vel_w = [np.zeros_like(w) for w in net.weights]
        self.vel_b = [np.zeros_like(b) for b in net.biases]

    def step(self, net: MLP, grads_w, grads_b):
        norm_sq = sum(float(np.sum(g * g)) for g in grads_w)
        norm_sq += sum(float(np.sum(g * g)) for g in grads_b)
        norm = math.sqrt(norm_sq)
        scale = 1.0 if norm <= self.clip else self.clip / norm
        for i in range(len(net.weights)):
            self.vel_w[i] = self.momentum * self.vel_w[i] - self.lr * scale * grads_w[i]
            self.vel_b[i] = self.momentum * self.vel_b[i] - self.lr * scale * grads_b[i]
            net.weights[i] += self.vel_w[i]
            net.biases[i] += self.vel_b[i]


def _q_learning_update(
    net: MLP, opt: _SgdMomentum, x, a, y
) -> float:
    """One MSE minibatch step on the taken-action Q values; returns the loss."""
    # forward with cached activations
    acts = [x]
    h = x
    last = len(net.weights) - 1
    pre = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = np.tanh(z) if i != last else z
        acts.append(h)
    q = acts[-1]
    n = x.shape[0]
    taken = q[np.arange(n), a]
    err = taken - y
    loss = float(np.mean(err**2))

    # backward: dL/dq is nonzero only at the taken actions
    dq = np.zeros_like(q)
    dq[np.arange(n), a] = 2.0 * err / n
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    delta = dq
    for i in range(last, -1, -1):
        grads_w[i] = delta.T @ acts[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * (1.0 - np.tanh(pre[i - 1]) ** 2)
    opt.step(net, grads_w, grads_b)
    return loss


@dataclass
class TrainingLog:
    episodes: list = field(default_factory=list)  # (episode, return, mean_loss, eps)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "return", "loss", "epsilon"])
            for row in self.episodes:
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def train_level_k_agent(
    role: str,
    k: int,
    opponent,
    reward_params: rw.RewardParams | None = None,
    cfg: TrainerConfig | None = None,
    scenario: ScenarioConfig | None = None,
    uses_psi: bool = False,
) -> tuple[QPolicy, TrainingLog]:
    """Train one level-k agent with DDQN against a frozen opponent policy.

    For an SVO-conditioned challenger (``uses_psi``), the angle is drawn
    uniformly per episode and fed to the network as a fifth input; otherwise
    the angle is identically zero.
    """
    if role not in ("POV", "VUT"):
        raise ValueError(f"unknown role {role!r}")
    if k not in (1, 2):
        raise ValueError("only levels 1 and 2 are trained")
    if uses_psi and role != "POV":
        raise ValueError("only the challenger is SVO-conditioned")
    reward_params = reward_params if reward_params is not None else rw.RewardParams()
    cfg = cfg if cfg is not None else TrainerConfig()
    scenario = scenario if scenario is not None else ScenarioConfig()

    rng = np.random.default_rng(cfg.seed)
    input_dim = 5 if uses_psi else 4
    net = MLP.init([input_dim, *cfg.hidden_sizes, N_ACTIONS], rng)
    target = net.copy()
    opt = _SgdMomentum(net, cfg.learning_rate, cfg.momentum, cfg.grad_clip)
    buf = ReplayBuffer(cfg.replay_capacity, input_dim)
    opp_cap = getattr(opponent, "speed_cap", math.inf)
    log = TrainingLog()

    global_step = 0
    for episode in range(cfg.episodes):
        x_pov0 = rng.uniform(*cfg.x_pov0_range)
        v_pov0 = rng.uniform(*cfg.v_pov0_range)
        psi = rng.uniform(*cfg.psi_range) if uses_psi else 0.0
        psi_in = psi if uses_psi else None

        opp_reset = getattr(opponent, "reset", None)
        if opp_reset is not None:
            opp_reset()
        s = State(x_pov0, v_pov0, scenario.x_vut0, scenario.v_vut0)
        ep_return = 0.0
        losses = []
        eps = cfg.eps_end + (cfg.eps_start - cfg.eps_end) * max(
            0.0, 1.0 - global_step / cfg.eps_decay_steps
        )
        for t in range(scenario.max_steps):
            x_in = normalize_input(s, psi_in)
            if rng.uniform() < eps:
                a_idx = int(rng.integers(N_ACTIONS))
            else:
                a_idx = int(np.argmax(net.forward(x_in)))
            opp_idx = opponent(s)
            if role == "POV":
                ia_pov, ia_vut = a_idx, opp_idx
                cap_pov, cap_vut = math.inf, opp_cap
            else:
                ia_pov, ia_vut = opp_idx, a_idx
                cap_pov, cap_vut = opp_cap, math.inf
            s_next = step_dynamics(
                s,
                ACTION_SET[ia_pov],
                ACTION_SET[ia_vut],
                scenario.dt,
                v_cap_pov=cap_pov,
                v_cap_vut=cap_vut,
            )
            terminal = s_next.x_vut >= scenario.merge_point or t == scenario.max_steps - 1
            safety = None
            if terminal:
                traj = Trajectory(
                    states=np.array([s_next.as_array()]),
                    actions=np.zeros((0, 2), dtype=np.int64),
                )
                safety = compute_safety_features(traj, dx_crash=reward_params.dx_crash)
            r = rw.step_reward(
                role,
                psi,
                s_next,
                ACTION_SET[ia_pov],
                ACTION_SET[ia_vut],
                reward_params,
                terminal=terminal,
                safety=safety,
            )
            ep_return += r
            buf.push(
                x_in,
                a_idx,
                r / cfg.reward_scale,
                normalize_input(s_next, psi_in),
                terminal,
            )
            global_step += 1
            if buf.size >= max(cfg.warmup_steps, cfg.minibatch_size):
                bx, ba, br, bx2, bt = buf.sample(cfg.minibatch_size, rng)
                y = ddqn_target(br, bx2, bt, net, target, cfg.gamma)
                loss = _q_learning_update(net, opt, bx, ba, y)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at episode {episode}, step {global_step}"
                    )
                losses.append(loss)
            if global_step % cfg.target_sync_period == 0:
                target = net.copy()
            s = s_next
            if terminal:
                break
        mean_loss = float(np.mean(losses)) if losses else math.nan
        log.episodes.append((episode, ep_return, mean_loss, eps))

    policy = QPolicy(network=net, role=role, level=k, uses_psi=uses_psi)
    return policy, log


# --- library construction -------------------------------------------------

LIBRARY_STAGES = (
    ("pov_level1", "POV", 1, False),
    ("vut_level1", "VUT", 1, False),
    ("pov_level2", "POV", 2, True),
)


def _stage_seed(name: str) -> int:
    """Stable per-stage default seed (process-independent, unlike hash())."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "big") % 2**31


def _stage_opponent(name: str, policies: dict):
    if name == "pov_level1":
        return Level0Vut()
    if name == "vut_level1":
        return Level0Pov()
    if name == "pov_level2":
        return policies["vut_level1"]
    raise KeyError(name)


def build_pov_library(
    out_dir,
    cfgs: dict | None = None,
    reward_params: rw.RewardParams | None = None,
    scenario: ScenarioConfig | None = None,
    force: bool = False,
) -> dict:
    """Run the double-helix training sequence and persist the policy files.

    Returns the manifest dict.  Stages with an existing, checksum-valid
    policy file are skipped unless ``force``.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.json")
    manifest = {"format_version": 1, "policies": {}}
    if os.path.exists(manifest_path) and not force:
        with open(manifest_path) as fh:
            manifest = json.load(fh)

    cfgs = cfgs if cfgs is not None else {}
    policies: dict[str, QPolicy] = {}
    for name, role, level, uses_psi in LIBRARY_STAGES:
        path = os.path.join(out_dir, f"{name}.json")
        entry = manifest["policies"].get(name)
        if (
            not force
            and entry is not None
            and os.path.exists(path)
            and policy_checksum(path) == entry["sha256"]
        ):
            policies[name] = QPolicy.load(path)
            continue
        cfg = cfgs.get(name, TrainerConfig(seed=_stage_seed(name)))
        try:
            policy, log = train_level_k_agent(
                role,
                level,
                _stage_opponent(name, policies),
                reward_params=reward_params,
                cfg=cfg,
                scenario=scenario,
                uses_psi=uses_psi,
            )
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"stage {name}: {exc}") from exc
        policy.save(path)
        log.to_csv(os.path.join(out_dir, f"{name}_log.csv"))
        manifest["policies"][name] = {
            "path": f"{name}.json",
            "role": role,
            "level": level,
            "uses_psi": uses_psi,
            "seed": cfg.seed,
            "sha256": policy_checksum(path),
        }
        policies[name] = policy
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2)

    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_library(out_dir) -> dict:
    """Load the challenger library: maps level L (0, 1, 2) to a policy object.

    Verifies file checksums against the manifest.
    """
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    lib = {0: Level0Pov()}
    for name, entry in manifest["policies"].items():
        path = os.path.join(out_dir, entry["path"])
        if policy_checksum(path) != entry["sha256"]:
            raise ValueError(f"checksum mismatch for {path}")
        policy = QPolicy.load(path)
        if entry["role"] == "POV":
            lib[entry["level"]] = policy
    return lib

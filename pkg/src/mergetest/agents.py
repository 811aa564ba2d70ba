"""Driving policies: naive level-0 profiles, trained Q-network agents, and the
staged rule-based merging controllers used as evaluation subjects.

Every policy is a deterministic callable State -> action index into
``sim_core.ACTION_SET``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .sim_core import ACTION_SET, IDX_COAST, N_ACTIONS, State

POLICY_FORMAT_VERSION = 1

# Network input normalization: keeps positions/speeds/angle roughly in [-1, 1].
POS_SCALE = 400.0
SPEED_SCALE = 40.0
PSI_SCALE = math.pi / 2

LEVEL0_VUT_ACCEL = 1.0  # m/s^2
LEVEL0_VUT_TARGET_SPEED = 28.0  # m/s
IDX_PLUS_ONE = ACTION_SET.index(1.0)


class Level0Pov:
    """Inattentive main-lane driver: constant speed regardless of the VUT."""

    role = "POV"
    level = 0

    def __call__(self, state: State) -> int:
        return IDX_COAST


class Level0Vut:
    """Inattentive merger: accelerate at 1 m/s^2 up to 28 m/s, then cruise."""

    role = "VUT"
    level = 0
    speed_cap = LEVEL0_VUT_TARGET_SPEED

    def __call__(self, state: State) -> int:
        if state.v_vut < LEVEL0_VUT_TARGET_SPEED:
            return IDX_PLUS_ONE
        return IDX_COAST


def normalize_input(state: State, psi: float | None = None) -> np.ndarray:
    x = [
        state.x_pov / POS_SCALE,
        state.v_pov / SPEED_SCALE,
        state.x_vut / POS_SCALE,
        state.v_vut / SPEED_SCALE,
    ]
    if psi is not None:
        x.append(psi / PSI_SCALE)
    return np.array(x)


class MLP:
    """Plain feedforward net with tanh hidden layers and a linear head."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases):
            raise ValueError("mismatched layer counts")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator) -> "MLP":
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Batch or single-input forward pass."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i != last:
                h = np.tanh(h)
        return h

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class QPolicy:
    """Greedy policy over a trained action-value network.

    Level-2 challengers condition on the SVO angle as an extra input; use
    ``bind(psi)`` to obtain an episode-ready callable.
    """

    network: MLP
    role: str
    level: int
    uses_psi: bool = False

    def __post_init__(self):
        n_in = self.network.sizes[0]
        expected = 5 if self.uses_psi else 4
        if n_in != expected:
            raise ValueError(f"network expects {n_in} inputs, policy needs {expected}")
        if self.network.sizes[-1] != N_ACTIONS:
            raise ValueError("network must output one value per action")

    def q_values(self, state: State, psi: float | None = None) -> np.ndarray:
        if self.uses_psi != (psi is not None):
            raise ValueError("SVO angle required iff the policy is SVO-conditioned")
        return self.network.forward(normalize_input(state, psi))

    def act(self, state: State, psi: float | None = None) -> int:
        q = self.q_values(state, psi)
        return int(np.argmax(q))  # lowest index wins ties

    def __call__(self, state: State) -> int:
        if self.uses_psi:
            raise ValueError("SVO-conditioned policy must be bound to an angle first")
        return self.act(state)

    def bind(self, psi: float) -> "BoundQPolicy":
        if not self.uses_psi:
            raise ValueError("policy does not take an SVO angle")
        return BoundQPolicy(self, psi)

    # --- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": POLICY_FORMAT_VERSION,
            "role": self.role,
            "level": self.level,
            "uses_psi": self.uses_psi,
            "layer_sizes": self.network.sizes,
            "normalization": {
                "pos_scale": POS_SCALE,
                "speed_scale": SPEED_SCALE,
                "psi_scale": PSI_SCALE,
            },
            "weights": [w.ravel().tolist() for w in self.network.weights],
            "biases": [b.tolist() for b in self.network.biases],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d: dict) -> "QPolicy":
        if d.get("format_version") != POLICY_FORMAT_VERSION:
            raise ValueError(f"unsupported policy format: {d.get('format_version')}")
        sizes = d["layer_sizes"]
        weights = [
            np.array(w).reshape(n_out, n_in)
            for w, n_in, n_out in zip(d["weights"], sizes[:-1], sizes[1:])
        ]
        biases = [np.array(b) for b in d["biases"]]
        return cls(
            network=MLP(weights, biases),
            role=d["role"],
            level=d["level"],
            uses_psi=d["uses_psi"],
        )

    @classmethod
    def load(cls, path) -> "QPolicy":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def policy_checksum(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@dataclass
class BoundQPolicy:
    """An SVO-conditioned policy fixed to one angle for the episode."""

    policy: QPolicy
    psi: float

    def __post_init__(self):
        if not 0.0 <= self.psi < math.pi / 2:
            raise ValueError("SVO angle must lie in [0, pi/2)")

    def __call__(self, state: State) -> int:
        return self.policy.act(state, self.psi)


def predict_gap_at_merge(
    state: State,
    accel: float = LEVEL0_VUT_ACCEL,
    target_speed: float = LEVEL0_VUT_TARGET_SPEED,
) -> float:
    """Predicted POV-VUT gap when the VUT reaches the merge point.

    Closed-form arrival time of the VUT under the naive merge profile
    (constant accel up to the target speed, then cruise), with the POV
    extrapolated at constant speed.  Returns +inf when the VUT cannot reach
    the merge point.
    """
    if state.x_vut >= 0:
        return state.x_pov
    d = -state.x_vut
    v = state.v_vut
    if v >= target_speed:
        if v <= 0:
            return math.inf
        t = d / v
    else:
        if accel <= 0:
            if v <= 0:
                return math.inf
            t = d / v
        else:
            t_ramp = (target_speed - v) / accel
            d_ramp = v * t_ramp + 0.5 * accel * t_ramp * t_ramp
            if d_ramp >= d:
                t = (-v + math.sqrt(v * v + 2.0 * accel * d)) / accel
            else:
                t = t_ramp + (d - d_ramp) / target_speed
    return state.x_pov + state.v_pov * t


def snap_to_action(a_cmd: float) -> int:
    """Nearest discrete action; ties resolve to the lower index."""
    best, best_err = 0, math.inf
    for i, a in enumerate(ACTION_SET):
        err = abs(a - a_cmd)
        if err < best_err - 1e-12:
            best, best_err = i, err
    return best


@dataclass(frozen=True)
class RuleBasedVutConfig:
    """Parameters of the 3-stage rule-based merging controller."""

    x_rb1: float = 120.0  # stage-2 trigger distance to the merge point
    x_rb2: float = 60.0  # stage-3 trigger distance
    dx_safe: float = 20.0  # predicted-gap "too close" threshold
    gap_setpoint: float = 25.0  # stage-3 tracked gap magnitude
    kp: float = 0.3
    ki: float = 0.0
    kd: float = 1.0
    dt: float = 0.1

    def __post_init__(self):
        if not 0 < self.x_rb2 < self.x_rb1:
            raise ValueError("need 0 < x_rb2 < x_rb1")


# Shipped reference designs; #2 triggers earlier ("faster response").
RULE_BASED_DESIGNS = {
    1: RuleBasedVutConfig(x_rb1=120.0, x_rb2=60.0),
    2: RuleBasedVutConfig(x_rb1=160.0, x_rb2=90.0),
}


class RuleBasedVut:
    """3-stage merging controller.

    Stage 1: follow the naive merge profile.  Stage 2 (within x_rb1 of M):
    coast whenever the predicted gap at M is too small.  Stage 3 (within
    x_rb2): PID on acceleration to push the predicted gap toward a setpoint.
    The gap prediction assumes a constant-speed POV, so a reactive challenger
    can invalidate it.
    """

    role = "VUT"
    speed_cap = LEVEL0_VUT_TARGET_SPEED

    def __init__(self, cfg: RuleBasedVutConfig | None = None):
        self.cfg = cfg if cfg is not None else RuleBasedVutConfig()
        self._level0 = Level0Vut()
        self.reset()

    def reset(self) -> None:
        self.stage = 1
        self._integral = 0.0
        self._prev_error: float | None = None

    def __call__(self, state: State) -> int:
        cfg = self.cfg
        dist = abs(state.x_vut)
        if self.stage == 1 and dist <= cfg.x_rb1:
            self.stage = 2
        if self.stage == 2 and dist <= cfg.x_rb2:
            self.stage = 3

        if self.stage == 1:
            return self._level0(state)

        gap = predict_gap_at_merge(state)
        if abs(gap) >= cfg.dx_safe:
            self._prev_error = None
            return self._level0(state)

        if self.stage == 2:
            return IDX_COAST

        # stage 3: open the gap toward the setpoint; decelerate when the POV
        # is predicted ahead at M, accelerate when behind.
        error = cfg.gap_setpoint - abs(gap)
        self._integral += error * cfg.dt
        deriv = 0.0
        if self._prev_error is not None:
            deriv = (error - self._prev_error) / cfg.dt
        self._prev_error = error
        magnitude = cfg.kp * error + cfg.ki * self._integral + cfg.kd * deriv
        direction = -1.0 if gap >= 0 else 1.0
        a_cmd = direction * magnitude
        a_cmd = min(max(a_cmd, ACTION_SET[0]), ACTION_SET[-1])
        return snap_to_action(a_cmd)

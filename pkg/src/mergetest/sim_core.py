"""Deterministic discrete-time simulation of the two-vehicle merge scenario.

Both vehicles are double integrators moving longitudinally on their own
lane-fixed axis.  The merge point M is the origin of both axes; the episode
ends when the merging vehicle (VUT) reaches M or the timeout elapses.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

# Discrete acceleration set shared by every policy (m/s^2).
ACTION_SET = (-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0)
N_ACTIONS = len(ACTION_SET)
IDX_COAST = 4  # index of a = 0


class SimulationFault(RuntimeError):
    """A policy produced a non-finite state."""


@dataclass(frozen=True)
class State:
    """Physical state: POV on the main lane, VUT on the ramp (merge point at 0)."""

    x_pov: float
    v_pov: float
    x_vut: float
    v_vut: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x_pov, self.v_pov, self.x_vut, self.v_vut])

    def is_finite(self) -> bool:
        return all(
            math.isfinite(v) for v in (self.x_pov, self.v_pov, self.x_vut, self.v_vut)
        )


@dataclass(frozen=True)
class ScenarioConfig:
    dt: float = 0.1
    x_vut0: float = -182.0
    v_vut0: float = 18.0
    t_max: float = 60.0
    merge_point: float = 0.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.x_vut0 > 0:
            raise ValueError("VUT must start at or upstream of the merge point")
        if self.t_max < self.dt:
            raise ValueError("t_max must cover at least one step")

    @property
    def max_steps(self) -> int:
        return int(math.ceil(self.t_max / self.dt))


@dataclass
class Trajectory:
    """Recorded episode: states[i] is the state before actions[i] were applied.

    ``states`` has one more row than ``actions``; action entries are indices
    into ACTION_SET, column 0 for the POV and column 1 for the VUT.
    """

    states: np.ndarray  # (t1 + 1, 4)
    actions: np.ndarray  # (t1, 2) int

    @property
    def t1(self) -> int:
        return self.actions.shape[0]

    @property
    def terminal_state(self) -> State:
        return State(*self.states[-1])

    def to_csv(self, path, dt: float = 0.1) -> None:
        """Dump as CSV: t, x_pov, v_pov, a_pov, x_vut, v_vut, a_vut."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x_pov", "v_pov", "a_pov", "x_vut", "v_vut", "a_vut"])
            for i in range(self.t1):
                s = self.states[i]
                a_pov = ACTION_SET[self.actions[i, 0]]
                a_vut = ACTION_SET[self.actions[i, 1]]
                w.writerow(
                    [
                        repr(round(i * dt, 6)),
                        repr(float(s[0])),
                        repr(float(s[1])),
                        repr(a_pov),
                        repr(float(s[2])),
                        repr(float(s[3])),
                        repr(a_vut),
                    ]
                )


@dataclass(frozen=True)
class SafetyFeatures:
    dx1: float
    dv1: float
    ttc: float  # +inf when the vehicles are not closing
    crashed: bool


@dataclass(frozen=True)
class EpisodeOutcome:
    trajectory: Trajectory
    safety: SafetyFeatures
    terminated_by: str  # "merge" | "timeout"

    @property
    def merged(self) -> bool:
        return self.terminated_by == "merge"


def step_dynamics(
    s: State,
    a_pov: float,
    a_vut: float,
    dt: float,
    v_cap_pov: float = math.inf,
    v_cap_vut: float = math.inf,
) -> State:
    """One Euler step of the double-integrator dynamics.

    Speeds clamp at zero (no reversing) and, optionally, at a per-vehicle cap
    declared by the acting policy (the inattentive merging profile holds an
    exact target speed rather than overshooting by a fraction of a step).
    """
    x_pov = s.x_pov + s.v_pov * dt
    x_vut = s.x_vut + s.v_vut * dt
    v_pov = min(max(s.v_pov + a_pov * dt, 0.0), max(v_cap_pov, s.v_pov))
    v_vut = min(max(s.v_vut + a_vut * dt, 0.0), max(v_cap_vut, s.v_vut))
    return State(x_pov, v_pov, x_vut, v_vut)


def ttc_from_gap(dx1: float, dv1: float) -> float:
    """Time-to-collision: gap over closing speed when closing, else infinite."""
    if dx1 * dv1 < 0:
        return dx1 / (-dv1)
    return math.inf


def compute_safety_features(traj: Trajectory, dx_crash: float = 6.0) -> SafetyFeatures:
    if traj.states.shape[0] == 0:
        raise ValueError("empty trajectory")
    s = traj.states[-1]
    dx1 = float(s[0] - s[2])
    dv1 = float(s[1] - s[3])
    return SafetyFeatures(
        dx1=dx1,
        dv1=dv1,
        ttc=ttc_from_gap(dx1, dv1),
        crashed=abs(dx1) < dx_crash,
    )


def run_episode(
    pov_policy,
    vut_policy,
    x_pov0: float,
    v_pov0: float,
    cfg: ScenarioConfig | None = None,
    dx_crash: float = 6.0,
) -> EpisodeOutcome:
    """Roll out one episode with both policies queried on the same pre-step state.

    Policies are callables State -> action index; an optional ``reset`` method
    clears per-episode internal state (e.g. the staged VUT controller), and an
    optional ``speed_cap`` attribute caps the vehicle's speed.
    """
    if cfg is None:
        cfg = ScenarioConfig()
    for p in (pov_policy, vut_policy):
        reset = getattr(p, "reset", None)
        if reset is not None:
            reset()
    cap_pov = getattr(pov_policy, "speed_cap", math.inf)
    cap_vut = getattr(vut_policy, "speed_cap", math.inf)

    s = State(x_pov0, v_pov0, cfg.x_vut0, cfg.v_vut0)
    states = [s.as_array()]
    actions: list[tuple[int, int]] = []
    terminated_by = "timeout"
    if s.x_vut >= cfg.merge_point:
        terminated_by = "merge"
    else:
        for _ in range(cfg.max_steps):
            ia_pov = pov_policy(s)
            ia_vut = vut_policy(s)
            s = step_dynamics(
                s,
                ACTION_SET[ia_pov],
                ACTION_SET[ia_vut],
                cfg.dt,
                v_cap_pov=cap_pov,
                v_cap_vut=cap_vut,
            )
            if not s.is_finite():
                raise SimulationFault(f"non-finite state produced: {s}")
            actions.append((ia_pov, ia_vut))
            states.append(s.as_array())
            if s.x_vut >= cfg.merge_point:
                terminated_by = "merge"
                break

    traj = Trajectory(
        states=np.array(states),
        actions=np.array(actions, dtype=np.int64).reshape(len(actions), 2),
    )
    return EpisodeOutcome(
        trajectory=traj,
        safety=compute_safety_features(traj, dx_crash=dx_crash),
        terminated_by=terminated_by,
    )


def replay_actions(
    traj: Trajectory,
    cfg: ScenarioConfig,
    v_cap_pov: float = math.inf,
    v_cap_vut: float = math.inf,
) -> np.ndarray:
    """Re-step the recorded actions from the recorded initial state."""
    s = State(*traj.states[0])
    out = [s.as_array()]
    for ia_pov, ia_vut in traj.actions:
        s = step_dynamics(
            s,
            ACTION_SET[ia_pov],
            ACTION_SET[ia_vut],
            cfg.dt,
            v_cap_pov=v_cap_pov,
            v_cap_vut=v_cap_vut,
        )
        out.append(s.as_array())
    return np.array(out)

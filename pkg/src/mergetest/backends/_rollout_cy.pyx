# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled episode-rollout kernel.

Mirrors the reference loop in ``sim_core``/``agents`` step for step: same
dynamics, same speed caps, same greedy tie-breaks, same staged-controller
arithmetic.  Any change here must be matched in the pure-Python backend.
"""

from libc.math cimport tanh, sqrt, fabs, INFINITY

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double[7] ACTIONS = [-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0]
cdef int IDX_COAST = 4
cdef int IDX_PLUS_ONE = 5
cdef double POS_SCALE = 400.0
cdef double SPEED_SCALE = 40.0
cdef double PSI_SCALE = 1.5707963267948966

cdef int KIND_CONST = 0
cdef int KIND_L0_POV = 1
cdef int KIND_L0_VUT = 2
cdef int KIND_QNET = 3
cdef int KIND_RULE = 4


cdef class CompiledPolicy:
    cdef int kind
    cdef int const_index
    cdef double speed_cap
    # qnet
    cdef int n_layers
    cdef int has_psi
    cdef double psi
    cdef list weights
    cdef list biases
    cdef double[::1] buf_a
    cdef double[::1] buf_b
    # rule-based
    cdef double x_rb1, x_rb2, dx_safe, gap_setpoint, kp, ki, kd, pid_dt
    cdef int stage
    cdef double integral
    cdef double prev_error
    cdef int has_prev_error

    def __init__(self, spec):
        kind = spec["kind"]
        self.speed_cap = INFINITY
        if kind == "const":
            self.kind = KIND_CONST
            self.const_index = spec["action_index"]
        elif kind == "level0_pov":
            self.kind = KIND_L0_POV
        elif kind == "level0_vut":
            self.kind = KIND_L0_VUT
            self.speed_cap = 28.0
        elif kind == "qnet":
            self.kind = KIND_QNET
            self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in spec["weights"]]
            self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in spec["biases"]]
            self.n_layers = len(self.weights)
            self.has_psi = 0 if spec["psi"] is None else 1
            self.psi = 0.0 if spec["psi"] is None else spec["psi"]
            width = max(max(w.shape[0] for w in self.weights), self.weights[0].shape[1])
            self.buf_a = np.zeros(width)
            self.buf_b = np.zeros(width)
        elif kind == "rule_based":
            self.kind = KIND_RULE
            cfg = spec["config"]
            self.x_rb1 = cfg.get("x_rb1", 120.0)
            self.x_rb2 = cfg.get("x_rb2", 60.0)
            self.dx_safe = cfg.get("dx_safe", 20.0)
            self.gap_setpoint = cfg.get("gap_setpoint", 25.0)
            self.kp = cfg.get("kp", 0.3)
            self.ki = cfg.get("ki", 0.0)
            self.kd = cfg.get("kd", 1.0)
            self.pid_dt = cfg.get("dt", 0.1)
            self.speed_cap = 28.0
        else:
            raise ValueError(f"unknown policy kind {kind!r}")

    cdef void reset(self):
        self.stage = 1
        self.integral = 0.0
        self.has_prev_error = 0

    cdef int qnet_act(self, double x_pov, double v_pov, double x_vut, double v_vut):
        cdef int i, j, n_in, n_out, layer, best
        cdef double acc, best_q
        cdef double[:, ::1] w
        cdef double[::1] b
        self.buf_a[0] = x_pov / POS_SCALE
        self.buf_a[1] = v_pov / SPEED_SCALE
        self.buf_a[2] = x_vut / POS_SCALE
        self.buf_a[3] = v_vut / SPEED_SCALE
        n_in = 4
        if self.has_psi:
            self.buf_a[4] = self.psi / PSI_SCALE
            n_in = 5
        for layer in range(self.n_layers):
            w = self.weights[layer]
            b = self.biases[layer]
            n_out = w.shape[0]
            for i in range(n_out):
                acc = b[i]
                for j in range(n_in):
                    acc += w[i, j] * self.buf_a[j]
                if layer != self.n_layers - 1:
                    acc = tanh(acc)
                self.buf_b[i] = acc
            self.buf_a[0:n_out] = self.buf_b[0:n_out]
            n_in = n_out
        best = 0
        best_q = self.buf_a[0]
        for i in range(1, n_in):
            if self.buf_a[i] > best_q:
                best_q = self.buf_a[i]
                best = i
        return best

    cdef int rule_based_act(self, double x_pov, double v_pov, double x_vut, double v_vut):
        cdef double dist, gap, error, deriv, magnitude, a_cmd
        cdef int level0
        dist = fabs(x_vut)
        if self.stage == 1 and dist <= self.x_rb1:
            self.stage = 2
        if self.stage == 2 and dist <= self.x_rb2:
            self.stage = 3
        level0 = IDX_PLUS_ONE if v_vut < 28.0 else IDX_COAST
        if self.stage == 1:
            return level0
        gap = predict_gap(x_pov, v_pov, x_vut, v_vut, 1.0, 28.0)
        if fabs(gap) >= self.dx_safe:
            self.has_prev_error = 0
            return level0
        if self.stage == 2:
            return IDX_COAST
        error = self.gap_setpoint - fabs(gap)
        self.integral += error * self.pid_dt
        deriv = 0.0
        if self.has_prev_error:
            deriv = (error - self.prev_error) / self.pid_dt
        self.prev_error = error
        self.has_prev_error = 1
        magnitude = self.kp * error + self.ki * self.integral + self.kd * deriv
        a_cmd = -magnitude if gap >= 0 else magnitude
        if a_cmd < ACTIONS[0]:
            a_cmd = ACTIONS[0]
        elif a_cmd > ACTIONS[6]:
            a_cmd = ACTIONS[6]
        return snap_action(a_cmd)

    cdef int act(self, double x_pov, double v_pov, double x_vut, double v_vut):
        if self.kind == KIND_CONST:
            return self.const_index
        if self.kind == KIND_L0_POV:
            return IDX_COAST
        if self.kind == KIND_L0_VUT:
            return IDX_PLUS_ONE if v_vut < 28.0 else IDX_COAST
        if self.kind == KIND_QNET:
            return self.qnet_act(x_pov, v_pov, x_vut, v_vut)
        return self.rule_based_act(x_pov, v_pov, x_vut, v_vut)


cdef double predict_gap(double x_pov, double v_pov, double x_vut, double v_vut,
                        double accel, double target_speed):
    cdef double d, t, t_ramp, d_ramp
    if x_vut >= 0:
        return x_pov
    d = -x_vut
    if v_vut >= target_speed:
        if v_vut <= 0:
            return INFINITY
        t = d / v_vut
    else:
        if accel <= 0:
            if v_vut <= 0:
                return INFINITY
            t = d / v_vut
        else:
            t_ramp = (target_speed - v_vut) / accel
            d_ramp = v_vut * t_ramp + 0.5 * accel * t_ramp * t_ramp
            if d_ramp >= d:
                t = (-v_vut + sqrt(v_vut * v_vut + 2.0 * accel * d)) / accel
            else:
                t = t_ramp + (d - d_ramp) / target_speed
    return x_pov + v_pov * t


cdef int snap_action(double a_cmd):
    cdef int i, best = 0
    cdef double err, best_err = INFINITY
    for i in range(7):
        err = fabs(ACTIONS[i] - a_cmd)
        if err < best_err - 1e-12:
            best = i
            best_err = err
    return best


def rollout(pov_spec, vut_spec, double x_pov0, double v_pov0,
            double x_vut0, double v_vut0, double dt, int max_steps,
            double merge_point=0.0):
    """Roll one episode; returns (states (T+1, 4), actions (T, 2), merged)."""
    cdef CompiledPolicy pov = pov_spec if isinstance(pov_spec, CompiledPolicy) else CompiledPolicy(pov_spec)
    cdef CompiledPolicy vut = vut_spec if isinstance(vut_spec, CompiledPolicy) else CompiledPolicy(vut_spec)
    pov.reset()
    vut.reset()

    cdef cnp.ndarray[cnp.float64_t, ndim=2] states = np.empty((max_steps + 1, 4))
    cdef cnp.ndarray[cnp.int64_t, ndim=2] actions = np.empty((max_steps, 2), dtype=np.int64)
    cdef double[:, ::1] sv = states
    cdef long long[:, ::1] av = actions

    cdef double x_pov = x_pov0, v_pov = v_pov0, x_vut = x_vut0, v_vut = v_vut0
    cdef double cap_pov = pov.speed_cap, cap_vut = vut.speed_cap
    cdef double hi
    cdef int t = 0, ia_pov, ia_vut
    cdef bint merged = x_vut >= merge_point

    sv[0, 0] = x_pov
    sv[0, 1] = v_pov
    sv[0, 2] = x_vut
    sv[0, 3] = v_vut
    if not merged:
        for t in range(max_steps):
            ia_pov = pov.act(x_pov, v_pov, x_vut, v_vut)
            ia_vut = vut.act(x_pov, v_pov, x_vut, v_vut)
            x_pov = x_pov + v_pov * dt
            x_vut = x_vut + v_vut * dt
            v_pov = v_pov + ACTIONS[ia_pov] * dt
            if v_pov < 0.0:
                v_pov = 0.0
            hi = cap_pov if cap_pov > sv[t, 1] else sv[t, 1]
            if v_pov > hi:
                v_pov = hi
            v_vut = v_vut + ACTIONS[ia_vut] * dt
            if v_vut < 0.0:
                v_vut = 0.0
            hi = cap_vut if cap_vut > sv[t, 3] else sv[t, 3]
            if v_vut > hi:
                v_vut = hi
            av[t, 0] = ia_pov
            av[t, 1] = ia_vut
            sv[t + 1, 0] = x_pov
            sv[t + 1, 1] = v_pov
            sv[t + 1, 2] = x_vut
            sv[t + 1, 3] = v_vut
            if x_vut >= merge_point:
                merged = True
                t += 1
                break
        else:
            t = max_steps
    return states[: t + 1], actions[:t], merged

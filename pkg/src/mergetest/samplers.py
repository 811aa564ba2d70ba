"""Test-case generation: GPR-guided adaptive sampling, softmax allocation
across challenger levels, and the baseline samplers (uniform, simulated
annealing, subset simulation).

Cases live in a per-level continuous pool; all sampling happens in the
normalized [0, 1]^d view of that pool (d = 2, plus the SVO angle for
level-2 challengers).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import gpr
from .backends import compile_spec, make_spec, rollout_case
from .metrics import FmcConfig, FmcResult, ScoreWeights, fmc, performance_score
from .sim_core import ScenarioConfig


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # not a pytest collection target

    x_pov0: float
    v_pov0: float
    psi: float  # only meaningful for level-2 challengers
    level: int


@dataclass(frozen=True)
class Pool:
    """Continuous sampling ranges and the affine map to normalized space."""

    x_range: tuple = (-400.0, -150.0)
    v_range: tuple = (20.0, 35.0)
    psi_range: tuple = (0.0, math.pi / 2)

    def dims(self, level: int) -> int:
        return 3 if level == 2 else 2

    def _bounds(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        lo = [self.x_range[0], self.v_range[0]]
        hi = [self.x_range[1], self.v_range[1]]
        if level == 2:
            lo.append(self.psi_range[0])
            hi.append(self.psi_range[1])
        return np.array(lo), np.array(hi)

    def normalize(self, case: TestCase) -> np.ndarray:
        lo, hi = self._bounds(case.level)
        raw = [case.x_pov0, case.v_pov0]
        if case.level == 2:
            raw.append(case.psi)
        return (np.array(raw) - lo) / (hi - lo)

    def denormalize(self, z: np.ndarray, level: int) -> TestCase:
        lo, hi = self._bounds(level)
        raw = lo + np.asarray(z, dtype=float) * (hi - lo)
        psi = float(raw[2]) if level == 2 else 0.0
        return TestCase(float(raw[0]), float(raw[1]), psi, level)

    def sample(self, n: int, level: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(size=(n, self.dims(level)))


@dataclass(frozen=True)
class SamplerConfig:
    n_total: int = 400
    batch_size: int = 20
    pool_size: int = 2000  # candidate pool per batch (p >> n)
    eps0: float = 0.5
    alpha: float = 0.95
    z1: float = 3.0
    z2: float = 1.0
    z3: float = 1.0
    z4: float = 3.0
    xi: float = 5.0
    u_threshold: float = -500.0  # failure threshold for the allocation signal
    dedup_radius: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.pool_size < 10 * self.batch_size:
            raise ValueError("candidate pool must be at least 10x the batch size")
        if not 0.0 < self.eps0 <= 1.0:
            raise ValueError("eps0 must lie in (0, 1]")
        if not 0.9 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0.9, 1)")
        if not (self.z1 > self.z2 and self.z3 < self.z4):
            raise ValueError("need z1 > z2 and z3 < z4")

    @property
    def n_batches(self) -> int:
        return self.n_total // self.batch_size


@dataclass
class CaseResult:
    case: TestCase
    z: np.ndarray  # normalized coordinates
    score: float
    crashed: bool
    batch: int


@dataclass
class BatchLog:
    index: int
    allocations: dict
    eps: float | None


@dataclass
class CampaignRecord:
    method: str
    results: list = field(default_factory=list)  # CaseResult
    batches: list = field(default_factory=list)  # BatchLog
    fmc_by_level: dict = field(default_factory=dict)  # level -> FmcResult

    def level_data(self, level: int):
        rs = [r for r in self.results if r.case.level == level]
        if not rs:
            return np.zeros((0, 2)), np.zeros(0)
        return np.array([r.z for r in rs]), np.array([r.score for r in rs])

    def compute_fmc(self, fmc_cfg: FmcConfig) -> dict:
        self.fmc_by_level = {}
        for level in sorted({r.case.level for r in self.results}):
            z, scores = self.level_data(level)
            self.fmc_by_level[level] = fmc(z, scores, fmc_cfg)
        return self.fmc_by_level


# --- episode execution ----------------------------------------------------


def _worker_run(args):
    pov_specs, vut_spec, scenario_kw, weights, cases = args
    scenario = ScenarioConfig(**scenario_kw)
    runner = CaseRunner._from_specs(pov_specs, vut_spec, scenario, weights)
    return [runner.run_case(c) for c in cases]


class CaseRunner:
    """Executes test cases against one VUT and scores them."""

    def __init__(
        self,
        pov_library: dict,
        vut_policy,
        scenario: ScenarioConfig | None = None,
        weights: ScoreWeights | None = None,
        jobs: int = 1,
    ):
        self.scenario = scenario if scenario is not None else ScenarioConfig()
        self.weights = weights if weights is not None else ScoreWeights()
        self.jobs = max(1, jobs)
        self._pov_specs = {
            lvl: (p if isinstance(p, dict) else make_spec(p))
            for lvl, p in pov_library.items()
        }
        self._vut_spec = (
            vut_policy if isinstance(vut_policy, dict) else make_spec(vut_policy)
        )
        self._compiled_vut = compile_spec(self._vut_spec)
        self._compiled_pov = {
            lvl: compile_spec(s) for lvl, s in self._pov_specs.items() if lvl != 2
        }

    @classmethod
    def _from_specs(cls, pov_specs, vut_spec, scenario, weights):
        return cls(pov_specs, vut_spec, scenario=scenario, weights=weights, jobs=1)

    def run_case(self, case: TestCase) -> tuple[float, bool]:
        if case.level == 2:
            spec = dict(self._pov_specs[2])
            spec["psi"] = case.psi
            pov = compile_spec(spec)
        else:
            pov = self._compiled_pov[case.level]
        outcome = rollout_case(
            pov, self._compiled_vut, case.x_pov0, case.v_pov0, self.scenario
        )
        return performance_score(outcome, self.weights), outcome.safety.crashed

    def run_cases(self, cases: list[TestCase]) -> list[tuple[float, bool]]:
        if self.jobs == 1 or len(cases) < 4:
            return [self.run_case(c) for c in cases]
        chunks = np.array_split(np.arange(len(cases)), self.jobs)
        scenario_kw = {
            "dt": self.scenario.dt,
            "x_vut0": self.scenario.x_vut0,
            "v_vut0": self.scenario.v_vut0,
            "t_max": self.scenario.t_max,
            "merge_point": self.scenario.merge_point,
        }
        payloads = [
            (
                self._pov_specs,
                self._vut_spec,
                scenario_kw,
                self.weights,
                [cases[i] for i in idx],
            )
            for idx in chunks
            if idx.size
        ]
        out: list[tuple[float, bool]] = []
        with ProcessPoolExecutor(max_workers=self.jobs) as pool:
            for part in pool.map(_worker_run, payloads):
                out.extend(part)
        return out


# --- GPR-guided selection -------------------------------------------------


def challenge_scores(mu: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Min-max normalize predicted scores to (0, 1]; lower mean => higher value.

    Magnitude-preserving: a predicted deep failure scores near 1, the pool's
    most benign prediction near the floor.  (A rank-based normalization was
    tried first and discarded: with thousands of candidates the per-rank
    increments are so small that the uncertainty factor swamps the challenge
    signal and exploitation stops homing in on predicted failure regions.)
    """
    mu = np.asarray(mu, dtype=float)
    span = float(np.max(mu) - np.min(mu))
    if span <= 0:
        return np.ones_like(mu)
    c = (np.max(mu) - mu) / span
    return floor + (1.0 - floor) * c


def query_quality(
    mu: np.ndarray, sigma: np.ndarray, exponents: tuple
) -> tuple[np.ndarray, np.ndarray]:
    """(q_exploit, q_explore) for a candidate pool.

    The challenge score c raises low predicted performance, the normalized
    posterior deviation raises uncertainty; when the pool is degenerate (all
    means identical) the ranking falls back to uncertainty alone.
    """
    z1, z2, z3, z4 = exponents
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    smax = float(np.max(sigma)) if sigma.size else 0.0
    sigma_n = sigma / smax if smax > 0 else np.ones_like(sigma)
    sigma_n = np.clip(sigma_n, 1e-12, 1.0)
    if mu.size == 0 or np.all(mu == mu[0]):
        return sigma_n.copy(), sigma_n.copy()
    c = challenge_scores(mu)
    return c**z1 * sigma_n**z2, c**z3 * sigma_n**z4


def _dedup_select(
    order: np.ndarray, candidates: np.ndarray, count: int, radius: float
) -> list[int]:
    """Greedy top-ranked picks with a minimum pairwise separation."""
    chosen: list[int] = []
    for idx in order:
        if len(chosen) >= count:
            break
        z = candidates[idx]
        if all(np.linalg.norm(z - candidates[j]) >= radius for j in chosen):
            chosen.append(int(idx))
    if len(chosen) < count:  # relax the separation rather than under-fill
        for idx in order:
            if len(chosen) >= count:
                break
            if int(idx) not in chosen:
                chosen.append(int(idx))
    return chosen


def exploration_fraction(cfg: SamplerConfig, batch_index: int) -> float:
    return cfg.eps0 * cfg.alpha ** (batch_index - 1)


def intra_level_batch(
    batch_index: int,
    n_cases: int,
    model: gpr.GprModel | None,
    level: int,
    pool: Pool,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """One batch of normalized cases for a single challenger level.

    Batch 1 is uniform; later batches rank a fresh uniform candidate pool by
    the exploit/explore qualities of the current surrogate.
    """
    if n_cases <= 0:
        return np.zeros((0, pool.dims(level)))
    if batch_index == 1:
        return pool.sample(n_cases, level, rng)
    if model is None:
        raise RuntimeError("adaptive batch requires a fitted surrogate")
    candidates = pool.sample(cfg.pool_size, level, rng)
    eps = exploration_fraction(cfg, batch_index)
    n_exploit = int(round((1.0 - eps) * n_cases))
    n_explore = n_cases - n_exploit
    post = model.predict(candidates)
    sigma = np.sqrt(post.var)
    q_exploit, q_explore = query_quality(post.mean, sigma, (cfg.z1, cfg.z2, cfg.z3, cfg.z4))

    exploit_order = np.argsort(-q_exploit, kind="stable")
    chosen = _dedup_select(exploit_order, candidates, n_exploit, cfg.dedup_radius)
    taken = set(chosen)
    explore_order = np.argsort(-q_explore, kind="stable")
    for idx in explore_order:
        if len(chosen) >= n_cases:
            break
        if int(idx) not in taken:
            chosen.append(int(idx))
            taken.add(int(idx))
    return candidates[chosen]


def allocate_levels(
    u: np.ndarray, xi: float, n: int
) -> np.ndarray:
    """Integer softmax allocation over levels by largest-remainder rounding."""
    u = np.asarray(u, dtype=float)
    logits = xi * u
    logits -= np.max(logits)
    w = np.exp(logits)
    props = w / np.sum(w)
    return largest_remainder(props * n, n)


def largest_remainder(quota: np.ndarray, n: int) -> np.ndarray:
    base = np.floor(quota).astype(int)
    rem = quota - base
    missing = n - int(np.sum(base))
    # ties resolve to the lowest index: stable sort on descending remainder
    order = np.argsort(-rem, kind="stable")
    for i in range(missing):
        base[order[i % len(base)]] += 1
    return base


def equal_split(n: int, k: int) -> np.ndarray:
    return largest_remainder(np.full(k, n / k), n)


# --- campaigns ------------------------------------------------------------


def _record_cases(
    record: CampaignRecord,
    runner: CaseRunner,
    pool: Pool,
    zs: np.ndarray,
    level: int,
    batch: int,
) -> list[CaseResult]:
    cases = [pool.denormalize(z, level) for z in zs]
    out = []
    for case, z, (score, crashed) in zip(cases, zs, runner.run_cases(cases)):
        res = CaseResult(case=case, z=np.asarray(z), score=score, crashed=crashed, batch=batch)
        record.results.append(res)
        out.append(res)
    return out


def uniform_campaign(
    runner: CaseRunner,
    n_total: int,
    level: int,
    pool: Pool | None = None,
    seed: int = 0,
) -> CampaignRecord:
    pool = pool if pool is not None else Pool()
    rng = np.random.default_rng(seed)
    record = CampaignRecord(method="uniform")
    zs = pool.sample(n_total, level, rng)
    _record_cases(record, runner, pool, zs, level, batch=1)
    record.batches.append(BatchLog(index=1, allocations={level: n_total}, eps=None))
    return record


@dataclass(frozen=True)
class AnnealingSchedule:
    t_start: float = 100.0
    t_end: float = 1.0
    proposal_scale: float = 0.1


def simulated_annealing_campaign(
    runner: CaseRunner,
    n_total: int,
    level: int,
    pool: Pool | None = None,
    schedule: AnnealingSchedule | None = None,
    seed: int = 0,
) -> CampaignRecord:
    """Metropolis search minimizing the performance score; every evaluation
    is logged as a test case."""
    pool = pool if pool is not None else Pool()
    schedule = schedule if schedule is not None else AnnealingSchedule()
    rng = np.random.default_rng(seed)
    record = CampaignRecord(method="sa")
    d = pool.dims(level)

    z = rng.uniform(size=d)
    res = _record_cases(record, runner, pool, z[None, :], level, batch=1)[0]
    score = res.score
    ratio = schedule.t_end / schedule.t_start
    for j in range(1, n_total):
        frac = j / max(n_total - 1, 1)
        temp = schedule.t_start * ratio**frac
        prop = np.clip(z + rng.normal(scale=schedule.proposal_scale, size=d), 0.0, 1.0)
        res = _record_cases(record, runner, pool, prop[None, :], level, batch=1)[0]
        delta = res.score - score
        if delta <= 0 or rng.uniform() < math.exp(-delta / temp):
            z, score = prop, res.score
    record.batches.append(BatchLog(index=1, allocations={level: n_total}, eps=None))
    return record


@dataclass(frozen=True)
class SubsetConfig:
    stage_size: int = 100
    quantile: float = 0.1
    proposal_width: float = 0.2


def subset_simulation_campaign(
    runner: CaseRunner,
    n_total: int,
    level: int,
    pool: Pool | None = None,
    cfg: SubsetConfig | None = None,
    lam: float = -500.0,
    seed: int = 0,
) -> CampaignRecord:
    """Staged descent toward the failure threshold with component-wise
    Metropolis resampling; every evaluation is logged."""
    pool = pool if pool is not None else Pool()
    cfg = cfg if cfg is not None else SubsetConfig()
    rng = np.random.default_rng(seed)
    record = CampaignRecord(method="subset")
    d = pool.dims(level)

    m = min(cfg.stage_size, n_total)
    zs = pool.sample(m, level, rng)
    results = _record_cases(record, runner, pool, zs, level, batch=1)
    evals = m
    threshold = math.inf
    batch = 1
    while evals < n_total:
        scores = np.array([r.score for r in results])
        pts = np.array([r.z for r in results])
        new_threshold = float(np.quantile(scores, cfg.quantile))
        new_threshold = max(new_threshold, lam)
        if new_threshold >= threshold and new_threshold > lam:
            break  # stagnated above the failure threshold
        threshold = min(new_threshold, threshold)
        keep = scores <= threshold
        seeds = [(pts[j], scores[j]) for j in range(len(scores)) if keep[j]]
        if not seeds:
            break
        batch += 1
        m = min(cfg.stage_size, n_total - evals)
        next_states = []
        for j in range(m):
            seed_z, seed_score = seeds[j % len(seeds)]
            prop = seed_z.copy()
            for dim in range(d):
                step = rng.uniform(-cfg.proposal_width, cfg.proposal_width)
                cand = prop[dim] + step
                if 0.0 <= cand <= 1.0:
                    prop[dim] = cand
            res = _record_cases(record, runner, pool, prop[None, :], level, batch=batch)[0]
            evals += 1
            if res.score <= threshold:
                next_states.append((res.z, res.score))
            else:  # chain stays at its seed
                next_states.append((seed_z, seed_score))
        results = [
            CaseResult(
                case=pool.denormalize(z, level),
                z=z,
                score=score,
                crashed=False,
                batch=batch,
            )
            for z, score in next_states
        ]
    return record


def run_adaptive_campaign(
    runner: CaseRunner,
    levels: list[int],
    cfg: SamplerConfig | None = None,
    pool: Pool | None = None,
    fmc_cfg: FmcConfig | None = None,
) -> CampaignRecord:
    """Batched GPR-guided campaign over one or more challenger levels.

    Each batch: allocate cases across levels from the previous batch's
    failure fractions, select cases per level with the surrogate, execute,
    then refit each level's surrogate on all accumulated data.
    """
    cfg = cfg if cfg is not None else SamplerConfig()
    pool = pool if pool is not None else Pool()
    rng = np.random.default_rng(cfg.seed)
    record = CampaignRecord(method="gpr")
    models: dict[int, gpr.GprModel | None] = {lvl: None for lvl in levels}
    acc_z: dict[int, list] = {lvl: [] for lvl in levels}
    acc_y: dict[int, list] = {lvl: [] for lvl in levels}

    prev_u = None
    for i in range(1, cfg.n_batches + 1):
        if i == 1 or prev_u is None:
            alloc = equal_split(cfg.batch_size, len(levels))
        else:
            alloc = allocate_levels(prev_u, cfg.xi, cfg.batch_size)
        eps = None if i == 1 else exploration_fraction(cfg, i)
        u_next = np.zeros(len(levels))
        for li, level in enumerate(levels):
            n_k = int(alloc[li])
            if n_k == 0:
                continue
            zs = intra_level_batch(i, n_k, models[level], level, pool, cfg, rng)
            results = _record_cases(record, runner, pool, zs, level, batch=i)
            for r in results:
                acc_z[level].append(r.z)
                acc_y[level].append(r.score)
            u_next[li] = sum(r.score < cfg.u_threshold for r in results) / n_k
            if len(acc_y[level]) >= 2:
                models[level] = gpr.fit(
                    np.array(acc_z[level]),
                    np.array(acc_y[level]),
                    n_restarts=2,
                    seed=cfg.seed + i,
                )
        record.batches.append(
            BatchLog(
                index=i,
                allocations={lvl: int(a) for lvl, a in zip(levels, alloc)},
                eps=eps,
            )
        )
        prev_u = u_next
    if fmc_cfg is not None:
        record.compute_fmc(fmc_cfg)
    return record

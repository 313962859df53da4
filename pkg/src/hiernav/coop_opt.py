"""Cooperative bi-level policy optimisation.

Group-relative policy gradient over the featurised softmax policy: per
decision context, a group of alternative choices is rolled out
counterfactually, rewarded with a mix of per-vehicle efficiency and a
shared regional-delay term, and mean-centred into advantages.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path as FilePath
from typing import Callable, Sequence

import numpy as np

from .mesosim import ARRIVED, Plan, TrafficState, check_connected, finalize, simulate_tick
from .navigators import DecisionRecord, HierarchicalNavigator
from .policy import GLOBAL, LEVELS, LOCAL, N_FEATURES, GreedyPolicy, PolicyParams, SoftmaxPolicy, log_softmax
from .scenario import Scenario

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3
HISTORY_FIELDS = ["iter", "mean_r_ind", "mean_r_share", "mean_combined", "objective", "kl", "grad_norm"]


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# rewards and the surrogate objective


def individual_reward(tau: float, tau_hat: float, n_idle: float, lam: float, ratio: str = "literal") -> float:
    """Travel-time ratio minus an idle penalty.

    ``ratio="literal"`` uses actual/(actual+planned); ``"inverted"`` uses
    planned/(actual+planned), which grows as the trip gets faster.
    """
    if tau_hat <= 0:
        raise ValueError("planned free-flow time must be positive")
    if tau < 0 or n_idle < 0:
        raise ValueError("travel time and idle steps must be >= 0")
    if ratio == "literal":
        r = tau / (tau + tau_hat)
    elif ratio == "inverted":
        r = tau_hat / (tau + tau_hat)
    else:
        raise ValueError(f"unknown reward ratio {ratio!r}")
    return r - lam * n_idle


def shared_reward(global_plan: Sequence[int], region_avg_times: Sequence[float]) -> float:
    """Negated mean regional travel time along the region sequence."""
    if not global_plan:
        raise ValueError("empty global plan")
    return -sum(region_avg_times[z] for z in global_plan) / len(global_plan)


def combined_reward(r_ind: float, r_share: float, alpha: float, share_scale: float = 1.0) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if share_scale <= 0:
        raise ValueError("share_scale must be positive")
    return alpha * r_ind + (1.0 - alpha) * (r_share / share_scale)


def group_advantages(rewards: Sequence[float], moving_avg: float | None = None) -> list[float]:
    """Rewards minus the group mean (or minus a supplied running baseline)."""
    if len(rewards) == 0:
        raise ValueError("empty group")
    base = math.fsum(rewards) / len(rewards) if moving_avg is None else moving_avg
    return [r - base for r in rewards]


def clipped_surrogate(ratio: float, advantage: float, eps: float) -> float:
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
    return min(ratio * advantage, clipped * advantage)


def kl_categorical(p: Sequence[float], q: Sequence[float]) -> float:
    """KL(p || q) for discrete distributions on a shared support."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions differ in support size")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("negative probability")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise ValueError("q must be positive wherever p is")
    return float(max(0.0, np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))


# ---------------------------------------------------------------------------
# batch structures


@dataclass
class RolloutSample:
    level: str
    features: np.ndarray
    index: int
    behavior_logp: float
    tau: float
    tau_hat: float
    n_idle: int
    r_ind: float = 0.0
    r_share: float = 0.0
    reward: float = 0.0
    group: int = 0


@dataclass
class Group:
    level: str
    context: str
    features: np.ndarray
    samples: list[RolloutSample]
    advantages: list[float] = field(default_factory=list)

    @property
    def mean_reward(self) -> float:
        return float(np.mean([s.reward for s in self.samples]))


@dataclass
class TrainerConfig:
    alpha: float = 0.5
    lam: float = 0.1
    eps: float = 0.2
    beta: float = 0.01
    group_size: int = 8
    learning_rate: float = 0.5
    iterations: int = 50
    temperature: float = 1.0
    seed: int = 0
    moving_avg: float | None = None
    reward_ratio: str = "literal"
    tau_hat: str = "route"
    share_scale: float | None = None
    contexts_per_iter: int = 12
    grad_clip: float = 1.0
    inner_steps: int = 1

    def __post_init__(self) -> None:
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lam and beta must be >= 0")
        if not 0 < self.eps < 1:
            raise ValueError("eps must be in (0, 1)")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.learning_rate < 0 or self.iterations < 0:
            raise ValueError("learning_rate and iterations must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.moving_avg is not None and not 0 <= self.moving_avg < 1:
            raise ValueError("moving_avg is a decay factor in [0, 1)")
        if self.reward_ratio not in ("literal", "inverted"):
            raise ValueError("reward_ratio must be 'literal' or 'inverted'")
        if self.tau_hat not in ("route", "shortest"):
            raise ValueError("tau_hat must be 'route' or 'shortest'")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainerConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown trainer keys: {sorted(unknown)}")
        # YAML 1.1 reads "1e9" as a string
        for k, v in d.items():
            kind = str(cls.__dataclass_fields__[k].type)
            if isinstance(v, str) and kind.startswith(("float", "int")):
                try:
                    d[k] = int(v) if kind == "int" else float(v)
                except ValueError:
                    raise ValueError(f"trainer.{k}: expected a number, got {v!r}") from None
        return cls(**d)


def _grad_logp(lp: np.ndarray, feats: np.ndarray, idx: int, temp: float) -> np.ndarray:
    p = np.exp(lp)
    return (feats[idx] - p @ feats) / temp


def _kl_and_grad(theta, ref_theta, feats, temp) -> tuple[float, np.ndarray]:
    lp = log_softmax(theta, feats, temp)
    lq = log_softmax(ref_theta, feats, temp)
    p = np.exp(lp)
    kl = float(np.sum(p * (lp - lq)))
    dz = p * (lp - lq - kl)
    return kl, (dz @ feats) / temp


def grpo_objective_and_gradient(
    params: PolicyParams,
    ref_params: PolicyParams,
    groups: Sequence[Group],
    config: TrainerConfig,
) -> tuple[float, np.ndarray, dict]:
    """Clipped group-relative objective minus the KL penalty, and its exact gradient.

    The gradient is over ``theta_global`` followed by ``theta_local``.
    """
    temp = params.temperature
    total = 0.0
    grad = np.zeros(2 * N_FEATURES)
    kl_sum = 0.0
    for li, level in enumerate(LEVELS):
        gs = [g for g in groups if g.level == level]
        if not gs:
            continue
        theta = params.theta(level)
        ref = ref_params.theta(level)
        n = sum(len(g.samples) for g in gs)
        surr = 0.0
        g_surr = np.zeros(N_FEATURES)
        kl_tot = 0.0
        g_kl = np.zeros(N_FEATURES)
        for g in gs:
            lp = log_softmax(theta, g.features, temp)
            for s, a in zip(g.samples, g.advantages):
                ratio = math.exp(lp[s.index] - s.behavior_logp)
                val = clipped_surrogate(ratio, a, config.eps)
                surr += val
                # the unclipped branch is the active one iff it attains the min
                if ratio * a <= val:
                    g_surr += a * ratio * _grad_logp(lp, g.features, s.index, temp)
            kl, gk = _kl_and_grad(theta, ref, g.features, temp)
            kl_tot += kl
            g_kl += gk
        obj = surr / n - config.beta * kl_tot / len(gs)
        total += obj
        kl_sum += kl_tot / len(gs)
        grad[li * N_FEATURES : (li + 1) * N_FEATURES] = g_surr / n - config.beta * g_kl / len(gs)
    return total, grad, {"kl": kl_sum}


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class _Context:
    record: DecisionRecord
    snapshot: TrafficState
    other_level_index: dict


class _Collector:
    """Records decision contexts with one shared snapshot per tick."""

    def __init__(self) -> None:
        self.records: list[tuple[DecisionRecord, TrafficState]] = []
        self._snap_t = -1
        self._snap: TrafficState | None = None

    def __call__(self, state: TrafficState, rec: DecisionRecord) -> None:
        if self._snap_t != state.t:
            self._snap = state.clone()
            self._snap_t = state.t
        self.records.append((rec, self._snap))


def rollout_episode(scenario: Scenario, navigator, seed: int):
    """Run one episode, returning the final state and the plans handed out."""
    state = TrafficState.initial(scenario.net, scenario.partition, scenario.demand(seed), scenario.sim_config(seed))
    check_connected(state)
    replay: dict[tuple[int, int], Plan] = {}
    horizon = state.config.horizon_steps
    while state.t < horizon:
        keys = {vid: state.vehicles[vid].n_decisions for vid in state.decision_points()}
        decisions = simulate_tick(state, navigator)
        for vid, plan in decisions.items():
            if vid in keys:
                replay[(vid, keys[vid])] = plan
    finalize(state)
    return state, replay


def _trip_outcome(state: TrafficState, vid: int, tau_hat_mode: str = "route") -> tuple[float, float, int]:
    """Travel time, free-flow reference and idle steps of one vehicle.

    ``tau_hat_mode="route"`` uses the free-flow time of the route driven;
    ``"shortest"`` uses the free-flow shortest origin-destination time.
    """
    v = state.vehicles[vid]
    end = v.arrive_step if v.status == ARRIVED else state.t
    tau = (end - v.depart_step) * state.dt
    shortest = state.static.ff_distance(v.dest)[v.origin]
    tau_hat = v.planned_fft if tau_hat_mode == "route" and v.planned_fft > 0 else shortest
    return tau, max(tau_hat, 1e-9), state.idle_steps(v)


def counterfactual_outcome(
    scenario: Scenario,
    snapshot: TrafficState,
    replay: dict,
    vid: int,
    forced: dict,
    tau_hat_mode: str = "route",
) -> tuple[float, float, int]:
    """Finish ``vid``'s trip from ``snapshot`` with its choice forced and everyone else replayed."""
    state = snapshot.clone()
    others = {k: p for k, p in replay.items() if k[0] != vid}
    nav = HierarchicalNavigator(
        scenario.net, scenario.partition, scenario.region_graph, GreedyPolicy(), forced=forced, replay=others
    )
    horizon = state.config.horizon_steps
    v = state.vehicles[vid]
    while state.t < horizon and v.status != ARRIVED:
        simulate_tick(state, nav)
        v = state.vehicles[vid]
    return _trip_outcome(state, vid, tau_hat_mode)


@dataclass
class IterationResult:
    groups: list[Group]
    stats: dict


def collect_groups(
    scenario: Scenario,
    ref: PolicyParams,
    config: TrainerConfig,
    rng: np.random.Generator,
    episode_seed: int,
    share_scale: float,
) -> list[Group]:
    collector = _Collector()
    nav = HierarchicalNavigator(
        scenario.net, scenario.partition, scenario.region_graph,
        SoftmaxPolicy(ref, np.random.default_rng(rng.integers(2**63))), recorder=collector,
    )
    _, replay = rollout_episode(scenario, nav, episode_seed)

    chosen_index: dict[tuple[int, int, str], int] = {}
    usable = []
    for rec, snap in collector.records:
        chosen_index.setdefault((rec.vehicle_id, rec.decision_no, rec.level), rec.decision.index)
        if len(rec.context.candidates) >= 2:
            usable.append((rec, snap))
    if not usable:
        return []
    take = min(config.contexts_per_iter, len(usable))
    picks = sorted(rng.choice(len(usable), size=take, replace=False).tolist())

    groups = []
    for gi in picks:
        rec, snap = usable[gi]
        ctx = rec.context
        lp = log_softmax(ref.theta(rec.level), ctx.features, ref.temperature)
        p = np.exp(lp)
        idxs = rng.choice(len(p), size=config.group_size, p=p / p.sum())
        other = LOCAL if rec.level == GLOBAL else GLOBAL
        samples = []
        for idx in idxs.tolist():
            forced = {(rec.vehicle_id, rec.decision_no, rec.level): idx}
            ok = (rec.vehicle_id, rec.decision_no, other)
            if ok in chosen_index:
                forced[ok] = chosen_index[ok]
            tau, tau_hat, idle = counterfactual_outcome(
                scenario, snap, replay, rec.vehicle_id, forced, config.tau_hat
            )
            if rec.level == GLOBAL:
                plan = ctx.candidates[idx].regions
            else:
                given = replay.get((rec.vehicle_id, rec.decision_no))
                plan = (given.global_plan if given is not None else None) or _plan_at(ctx)
            r_ind = individual_reward(tau, tau_hat, idle, config.lam, config.reward_ratio)
            r_share = shared_reward(plan, rec.region_times)
            samples.append(
                RolloutSample(
                    rec.level, ctx.features, idx, float(lp[idx]), tau, tau_hat, idle,
                    r_ind, r_share, combined_reward(r_ind, r_share, config.alpha, share_scale), len(groups),
                )
            )
        groups.append(Group(rec.level, f"{rec.vehicle_id}:{rec.decision_no}:{rec.level}", ctx.features, samples))
    return groups


def _plan_at(ctx) -> tuple[int, ...]:
    obs = ctx.observation
    return (obs.region,) if obs.next_region < 0 else (obs.region, obs.next_region)


def _clip(g: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.linalg.norm(g))
    return g * (limit / n) if n > limit else g


def train(
    scenario: Scenario | Callable[[int], Scenario],
    config: TrainerConfig,
    init: PolicyParams | None = None,
    on_iter: Callable[[dict], None] | None = None,
) -> tuple[PolicyParams, list[dict]]:
    """Bi-level training of the softmax policy; returns final params and per-iteration history."""
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else PolicyParams(temperature=config.temperature)
    history: list[dict] = []
    baseline: dict[str, float] = {}
    for it in range(config.iterations):
        sc = scenario(it) if callable(scenario) else scenario
        share_scale = config.share_scale if config.share_scale is not None else sc.regional_free_flow()
        ref = params.copy()
        groups = collect_groups(sc, ref, config, rng, episode_seed=config.seed, share_scale=share_scale)
        for g in groups:
            rewards = [s.reward for s in g.samples]
            mean = float(np.mean(rewards))
            if config.moving_avg is None:
                g.advantages = group_advantages(rewards)
            else:
                prev = baseline.get(g.level, mean)
                baseline[g.level] = config.moving_avg * prev + (1 - config.moving_avg) * mean
                g.advantages = group_advantages(rewards, baseline[g.level])
        obj = kl = gnorm = 0.0
        if groups:
            for _ in range(max(1, config.inner_steps)):
                obj, grad, info = grpo_objective_and_gradient(params, ref, groups, config)
                kl = info["kl"]
                gnorm = float(np.linalg.norm(grad))
                step = _clip(grad, config.grad_clip) * config.learning_rate
                if config.learning_rate > 0:
                    params = PolicyParams.from_flat(params.flat + step, params.temperature)
        samples = [s for g in groups for s in g.samples]
        row = {
            "iter": it,
            "mean_r_ind": float(np.mean([s.r_ind for s in samples])) if samples else 0.0,
            "mean_r_share": float(np.mean([s.r_share for s in samples])) if samples else 0.0,
            "mean_combined": float(np.mean([s.reward for s in samples])) if samples else 0.0,
            "objective": float(obj),
            "kl": float(kl),
            "grad_norm": gnorm,
        }
        history.append(row)
        log.info("iter %d: %s", it, row)
        if on_iter is not None:
            on_iter(row)
        if float(np.mean(np.abs(params.flat))) > DIVERGENCE_LIMIT:
            raise TrainingDiverged(f"iteration {it}: mean |theta| exceeds {DIVERGENCE_LIMIT:g}: {params.flat.tolist()}")
    return params, history


def write_history(history: list[dict], path) -> None:
    with FilePath(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in HISTORY_FIELDS})

"""The four interchangeable search strategies.

All of them consume the shared Evaluator, so budget accounting, trace
structure, the train-consistency guard and best-plan tie-breaking are
identical across strategies; only the proposal logic differs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from ..actions import (
    ActionInstance,
    ActionSpace,
    kind_ordinal,
    sample_instance,
    shift_bounds,
)
from .core import Evaluator

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def random_search(ev: Evaluator, rng: np.random.Generator) -> None:
    """Even budget split across kinds, uniform parameter draws per kind."""
    kinds = ev.cfg.space.kinds
    total = ev.remaining
    per_kind = total // len(kinds)
    extra = total % len(kinds)
    candidates = []
    for i, kind in enumerate(kinds):
        n = per_kind + (1 if i < extra else 0)
        for _ in range(n):
            inst = sample_instance(kind, rng, space=ev.cfg.space, horizon=ev.horizon)
            candidates.append((inst,))
    ev.evaluate_many(candidates)


class _GoldenSection:
    """Golden-section maximization over one interval, one probe per pull."""

    def __init__(self, lo: float, hi: float):
        self.a = float(lo)
        self.b = float(hi)
        self.x1 = self.b - _INV_PHI * (self.b - self.a)
        self.x2 = self.a + _INV_PHI * (self.b - self.a)
        self.f1: float | None = None
        self.f2: float | None = None

    def next_probe(self) -> float:
        return self.x1 if self.f1 is None else self.x2

    @property
    def estimate(self) -> float:
        return (self.a + self.b) / 2.0

    def report(self, value: float) -> None:
        if self.f1 is None:
            self.f1 = value
            return
        self.f2 = value
        if self.f1 >= self.f2:
            self.b = self.x2
            self.x2 = self.x1
            self.f2 = self.f1
            self.x1 = self.b - _INV_PHI * (self.b - self.a)
            self.f1 = None
        else:
            self.a = self.x1
            self.x1 = self.x2
            self.f1 = self.f2
            self.x2 = self.a + _INV_PHI * (self.b - self.a)
            self.f2 = None


@dataclass
class _Arm:
    """One bandit arm per action kind; pulls refine its parameters."""

    kind: object
    lines: list[_GoldenSection]
    int_flags: list[bool]
    active: int = 0
    pulls: int = 0
    reward_sum: float = 0.0
    best_reward: float = -math.inf

    @classmethod
    def build(cls, kind, ranges, horizon) -> "_Arm":
        lines, flags = [], []
        for r in ranges:
            if r.integer_valued:
                lo, hi = shift_bounds(r, horizon)
                lines.append(_GoldenSection(lo, hi))
            else:
                lines.append(_GoldenSection(r.low, r.high))
            flags.append(r.integer_valued)
        return cls(kind=kind, lines=lines, int_flags=flags)

    @property
    def mean_reward(self) -> float:
        return self.reward_sum / self.pulls if self.pulls else 0.0

    def propose(self) -> tuple[ActionInstance, int]:
        if not self.lines:
            return ActionInstance(self.kind, ()), -1
        coord = self.active % len(self.lines)
        values = []
        for i, line in enumerate(self.lines):
            v = line.next_probe() if i == coord else line.estimate
            values.append(float(round(v)) if self.int_flags[i] else float(v))
        return ActionInstance(self.kind, tuple(values)), coord

    def update(self, coord: int, reward: float) -> None:
        self.pulls += 1
        self.reward_sum += reward
        self.best_reward = max(self.best_reward, reward)
        if coord >= 0:
            self.lines[coord].report(reward)
            self.active += 1


def _ucb_pick(live: list[_Arm], total_pulls: int, c: float) -> _Arm:
    for arm in live:
        if arm.pulls == 0:
            return arm
    return max(
        live,
        key=lambda a: a.mean_reward + c * math.sqrt(math.log(total_pulls) / a.pulls),
    )


def sh_hpo_search(ev: Evaluator, rng: np.random.Generator) -> list[_Arm]:
    """Successive halving over action kinds with UCB pull selection.

    Each pull advances a golden-section line search on the arm's parameters
    (coordinate-wise for two-parameter kinds); after each rung the worst half
    of the surviving arms is eliminated, ranked by best observed reward.
    """
    cfg = ev.cfg
    arms = [
        _Arm.build(kind, cfg.space.ranges_for(kind), ev.horizon)
        for kind in cfg.space.kinds
    ]
    budget = ev.remaining
    c = float(cfg.strategy_params.get("explore_c", math.sqrt(2.0)))

    def pull(arm: _Arm) -> None:
        inst, coord = arm.propose()
        outcome = ev.evaluate((inst,))
        arm.update(coord, outcome.reward)

    if budget < 2 * len(arms):
        # not enough for a halving schedule: one sweep, best single pull wins
        for arm in arms[:budget]:
            pull(arm)
        return arms

    rungs = max(1, math.ceil(math.log2(len(arms))))
    per_rung = budget // rungs
    live = list(arms)
    spent = 0
    total_pulls = 0
    for rung in range(rungs):
        rung_budget = per_rung if rung < rungs - 1 else budget - spent
        for _ in range(rung_budget):
            arm = _ucb_pick(live, max(total_pulls, 1), c)
            pull(arm)
            total_pulls += 1
            spent += 1
        if len(live) > 1:
            live.sort(key=lambda a: (-a.best_reward, kind_ordinal(a.kind)))
            live = live[: math.ceil(len(live) / 2)]
    return arms


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def policy_entropy(logits: np.ndarray) -> float:
    p = _softmax(logits)
    return float(-np.sum(p * np.log(np.maximum(p, 1e-300))))


def build_action_grid(
    space: ActionSpace, horizon: int, bins: int = 11, quantile_bins: int = 7
) -> list[ActionInstance]:
    """Discretize every kind's parameter space into bin centers."""
    grid: list[ActionInstance] = []
    for kind in space.kinds:
        ranges = space.ranges_for(kind)
        if not ranges:
            grid.append(ActionInstance(kind, ()))
            continue
        per_param: list[list[float]] = []
        for r in ranges:
            n = quantile_bins if r.name == "quantile" else bins
            if r.integer_valued:
                lo, hi = shift_bounds(r, horizon)
                centers = sorted(
                    {float(round(lo + (i + 0.5) * (hi - lo) / n)) for i in range(n)}
                )
            else:
                centers = [r.low + (i + 0.5) * (r.high - r.low) / n for i in range(n)]
            per_param.append(centers)
        for combo in itertools.product(*per_param):
            grid.append(ActionInstance(kind, tuple(combo)))
    return grid


def ppo_search(ev: Evaluator, rng: np.random.Generator) -> np.ndarray:
    """Clipped-surrogate policy gradient over a discretized action grid.

    The policy is one categorical distribution over grid cells plus an
    explicit stop action; an episode samples up to `seq_len` cells, the
    assembled plan is evaluated once, and the reward is its relative
    improvement (penalized when the train-consistency guard trips). Returns
    the final logits (useful for inspecting the learned policy).
    """
    cfg = ev.cfg
    params = cfg.strategy_params
    seq_len = int(params.get("seq_len", min(3, cfg.max_steps)))
    update_every = int(params.get("update_every", 8))
    clip = float(params.get("clip", 0.2))
    lr = float(params.get("lr", 0.5))
    epochs = int(params.get("epochs", 4))
    baseline_lr = float(params.get("baseline_lr", 0.2))
    penalty = float(params.get("inconsistency_penalty", 1.0))

    grid = build_action_grid(
        space=cfg.space,
        horizon=ev.horizon,
        bins=int(params.get("bins", 11)),
        quantile_bins=int(params.get("quantile_bins", 7)),
    )
    n_actions = len(grid) + 1  # slot 0 stops the episode early
    logits = np.zeros(n_actions)
    value_baseline = 0.0

    max_episodes = cfg.episodes if cfg.episodes is not None else cfg.budget
    batch: list[tuple[list[int], np.ndarray, float]] = []

    def flush() -> None:
        nonlocal logits, value_baseline
        if not batch:
            return
        rewards = np.array([r for _, _, r in batch])
        advantages = rewards - value_baseline
        value_baseline += baseline_lr * (float(rewards.mean()) - value_baseline)
        for _ in range(epochs):
            probs = _softmax(logits)
            grad = np.zeros_like(logits)
            for (chosen, old_probs, _), adv in zip(batch, advantages):
                for a in chosen:
                    ratio = probs[a] / old_probs[a]
                    clipped_out = (adv >= 0 and ratio > 1 + clip) or (
                        adv < 0 and ratio < 1 - clip
                    )
                    if not clipped_out:
                        one_hot = np.zeros_like(logits)
                        one_hot[a] = 1.0
                        grad += adv * ratio * (one_hot - probs)
            logits = logits + lr * grad / len(batch)
        batch.clear()

    episodes_done = 0
    while ev.remaining > 0 and episodes_done < max_episodes:
        probs = _softmax(logits)
        chosen: list[int] = []
        steps: list[ActionInstance] = []
        for _ in range(seq_len):
            a = int(rng.choice(n_actions, p=probs))
            chosen.append(a)
            if a == 0:
                break
            steps.append(grid[a - 1])
        outcome = ev.evaluate(tuple(steps))
        reward = outcome.reward - (0.0 if outcome.consistent else penalty)
        batch.append((chosen, probs, reward))
        episodes_done += 1
        if len(batch) >= update_every:
            flush()
    flush()
    return logits


def _random_genome(
    rng: np.random.Generator, space: ActionSpace, horizon: int, max_steps: int
) -> tuple[ActionInstance, ...]:
    kinds = space.kinds
    length = int(rng.integers(1, max_steps + 1))
    return tuple(
        sample_instance(kinds[rng.integers(len(kinds))], rng, space, horizon)
        for _ in range(length)
    )


def _mutate_genome(
    genome: tuple[ActionInstance, ...],
    rng: np.random.Generator,
    space: ActionSpace,
    horizon: int,
    std_frac: float,
) -> tuple[ActionInstance, ...]:
    mutated = []
    for step in genome:
        ranges = space.ranges_for(step.kind)
        values = []
        for r, v in zip(ranges, step.params):
            nv = v + rng.normal(0.0, std_frac * (r.high - r.low))
            if r.integer_valued:
                lo, hi = shift_bounds(r, horizon)
                nv = float(min(max(round(nv), lo), hi))
            else:
                nv = float(min(max(nv, r.low), r.high))
            values.append(nv)
        mutated.append(ActionInstance(step.kind, tuple(values)))
    return tuple(mutated)


def _crossover(
    a: tuple[ActionInstance, ...],
    b: tuple[ActionInstance, ...],
    rng: np.random.Generator,
) -> tuple[ActionInstance, ...]:
    length = len(a) if rng.random() < 0.5 else len(b)
    child = []
    for i in range(length):
        options = [g[i] for g in (a, b) if i < len(g)]
        child.append(options[int(rng.integers(len(options)))])
    return tuple(child)


def _tournament(
    pop: list, fits: list[float], k: int, rng: np.random.Generator
) -> tuple[ActionInstance, ...]:
    idx = rng.integers(0, len(pop), size=min(k, len(pop)))
    best = max(idx, key=lambda i: (fits[i], -i))
    return pop[best]


def ga_search(ev: Evaluator, rng: np.random.Generator) -> list:
    """Evolve plans with tournament selection, step-wise crossover and
    Gaussian parameter mutation; inconsistent plans get -inf fitness."""
    cfg = ev.cfg
    params = cfg.strategy_params
    pop_size = int(params.get("population", 30))
    k = int(params.get("tournament_k", 3))
    cx_rate = float(params.get("crossover_rate", 0.9))
    std_frac = float(params.get("mutation_std_frac", 0.1))

    def fitness(outcome) -> float:
        return outcome.reward if outcome.consistent else -math.inf

    pop_size = max(2, min(pop_size, ev.remaining))
    seeds = []
    for genome in params.get("seed_genomes", ()):
        steps = tuple(
            s if isinstance(s, ActionInstance) else ActionInstance.from_dict(s)
            for s in genome
        )
        seeds.append(steps)
    pop: list[tuple[ActionInstance, ...]] = seeds[:pop_size]
    while len(pop) < pop_size:
        pop.append(_random_genome(rng, cfg.space, ev.horizon, cfg.max_steps))
    fits = [fitness(ev.evaluate(g)) for g in pop]

    while ev.remaining > 0:
        elite = max(range(len(pop)), key=lambda i: (fits[i], -i))
        new_pop = [pop[elite]]
        new_fits = [fits[elite]]
        while len(new_pop) < pop_size and ev.remaining > 0:
            p1 = _tournament(pop, fits, k, rng)
            p2 = _tournament(pop, fits, k, rng)
            if rng.random() < cx_rate:
                child = _crossover(p1, p2, rng)
            else:
                child = p1 if rng.random() < 0.5 else p2
            child = _mutate_genome(child, rng, cfg.space, ev.horizon, std_frac)
            new_fits.append(fitness(ev.evaluate(child)))
            new_pop.append(child)
        pop, fits = new_pop, new_fits
    return pop

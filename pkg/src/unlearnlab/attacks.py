"""Harmful and benign retraining attacks on unlearned snapshots."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import BenignItem, CorpusSplits, Fact, attack_subset, benign_overlap
from .model import ModelSnapshot, fact_scores, lm_loss, make_batch

log = logging.getLogger(__name__)

HARMFUL_LRS = (1e-5, 5e-6, 1e-6)
BENIGN_LRS = (1e-5, 1e-6, 1e-7)
BENIGN_BATCH = 8  # 1000 items, so 300 steps is 2.4 epochs
# shared by every attack in the default study; optimizer matches unlearning,
# rates scaled x10 since x1 leaves every method at the recovery floor
DEFAULT_ATTACK: dict = {"steps": 300, "eval_every": 10, "seeds": (0, 1, 2), "optimizer": "adam", "lr_multiplier": 10.0}


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "harmful"
    p: float = 0.1
    learning_rates: tuple[float, ...] = HARMFUL_LRS
    steps: int = 300
    eval_every: int = 10
    seeds: tuple[int, ...] = (0, 1, 2)
    benign_size: int = 1000
    lr_multiplier: float = 1.0
    batch_size: int = 32
    optimizer: str = "adam"

    def __post_init__(self):
        if self.kind not in ("harmful", "benign"):
            raise AttackError(f"kind must be 'harmful' or 'benign', got {self.kind!r}")
        if self.kind == "harmful" and not 0 < self.p < 1:
            raise AttackError(f"harmful attack needs 0 < p < 1, got {self.p}")
        if self.kind == "benign" and self.benign_size < 1:
            raise AttackError("benign attack needs benign_size >= 1")
        if not self.learning_rates or min(self.learning_rates) <= 0:
            raise AttackError("learning rates must be a nonempty list of positive reals")
        if self.steps < 0 or self.eval_every < 1:
            raise AttackError("steps must be >= 0 and eval_every >= 1")
        if not self.seeds:
            raise AttackError("at least one seed is required")
        if self.optimizer not in ("sgd", "adam"):
            raise AttackError("optimizer must be 'sgd' or 'adam'")

    def effective_lrs(self) -> list[float]:
        return [lr * self.lr_multiplier for lr in self.learning_rates]


@dataclass
class AttackRun:
    seed: int
    learning_rate: float
    trajectory: list[tuple[int, float]]  # (step, fs)
    best_step: int = 0
    rs_at_max: float = math.nan  # test RS at the first step reaching max FS

    @property
    def max_fs(self) -> float:
        return max(fs for _, fs in self.trajectory)


@dataclass
class AttackReport:
    kind: str
    runs: list[AttackRun]
    max_fs: dict[int, float]  # per seed, max over learning rates and steps
    rs_at_max: dict[int, float]
    metadata: dict = field(default_factory=dict)
    best: dict[int, ModelSnapshot] = field(default_factory=dict, repr=False)
    final: dict[int, ModelSnapshot] = field(default_factory=dict, repr=False)  # end of the run behind max_fs

    @property
    def mean_max_fs(self) -> float:
        return float(np.mean(list(self.max_fs.values())))

    @property
    def mean_rs_at_max(self) -> float:
        return float(np.mean(list(self.rs_at_max.values())))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "mean_max_fs": self.mean_max_fs,
            "mean_rs_at_max": self.mean_rs_at_max,
            "max_fs": {str(k): v for k, v in self.max_fs.items()},
            "rs_at_max": {str(k): v for k, v in self.rs_at_max.items()},
            "runs": [
                {"seed": r.seed, "learning_rate": r.learning_rate, "max_fs": r.max_fs,
                 "best_step": r.best_step, "rs_at_max": r.rs_at_max,
                 "trajectory": [list(t) for t in r.trajectory]}
                for r in self.runs
            ],
            "metadata": self.metadata,
        }

    def write_trajectories(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seed", "learning_rate", "step", "fs"])
            for r in self.runs:
                for step, fs in r.trajectory:
                    w.writerow([r.seed, repr(r.learning_rate), step, repr(fs)])


def _finetune(
    snapshot: ModelSnapshot,
    pairs: Sequence,
    lr: float,
    config: AttackConfig,
    seed: int,
    evaluate: Callable[[ModelSnapshot], float],
    retained: Callable[[ModelSnapshot], float],
) -> tuple[AttackRun, ModelSnapshot, ModelSnapshot]:
    """Train on ``pairs``; FS trajectory, the snapshot (and its test RS) at the first max-FS step, the final snapshot."""
    params = snapshot.working_copy()
    rng = np.random.default_rng(seed)
    n = len(pairs)
    bs = min(config.batch_size or n, n)
    opt = (torch.optim.Adam if config.optimizer == "adam" else torch.optim.SGD)(list(params.values()), lr=lr)
    run = AttackRun(seed, lr, [])
    best: tuple[float, ModelSnapshot] | None = None
    for step in range(config.steps + 1):
        if step % config.eval_every == 0 or step == config.steps:
            snap = snapshot.replace(params, snapshot.step + step)
            fs = evaluate(snap)
            run.trajectory.append((step, fs))
            if best is None or fs > best[0]:
                frozen = snapshot.replace({k: v.detach().clone() for k, v in params.items()}, snapshot.step + step)
                best = (fs, frozen)
                run.best_step, run.rs_at_max = step, retained(frozen)
        if step == config.steps:
            break
        idx = np.sort(rng.choice(n, size=bs, replace=False)) if bs < n else np.arange(n)
        loss = lm_loss(snapshot.config, params, make_batch([pairs[i] for i in idx], snapshot.config))
        if not math.isfinite(float(loss.detach())):
            log.warning("attack diverged at step %d (lr=%g)", step, lr)
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    final = snapshot.replace({k: v.detach().clone() for k, v in params.items()}, snapshot.step + step)
    return run, best[1], final


def _evaluators(facts: Sequence[Fact], splits: CorpusSplits):
    def evaluate(snap: ModelSnapshot) -> float:
        return float(fact_scores(snap, facts).mean())

    def retained(snap: ModelSnapshot) -> float:
        return float(fact_scores(snap, splits.test).mean()) if splits.test else math.nan

    return evaluate, retained


def eligible_facts(snapshot: ModelSnapshot, facts: Sequence[Fact]) -> list[Fact]:
    """Forget facts the unlearned model answers wrongly under every template."""
    scores = fact_scores(snapshot, facts)
    return [f for f, s in zip(facts, scores) if s == 0.0]


def _aggregate(kind: str, runs: list[AttackRun], best: dict, final: dict, config: AttackConfig, meta: dict) -> AttackReport:
    max_fs, rs_at = {}, {}
    for seed in config.seeds:
        top = None
        for r in runs:  # ties keep the earliest learning rate in grid order
            if r.seed == seed and (top is None or r.max_fs > top[0]):
                top = (r.max_fs, r.rs_at_max)
        max_fs[seed], rs_at[seed] = top
    meta = {
        **meta,
        "aggregation": "max over (learning rate, step) per seed, then mean over seeds",
        "lr_multiplier": config.lr_multiplier,
        "learning_rates": config.effective_lrs(),
        "optimizer": config.optimizer,
    }
    return AttackReport(kind, runs, max_fs, rs_at, meta, best, final)


def harmful_attack(unlearned: ModelSnapshot, splits: CorpusSplits, config: AttackConfig) -> AttackReport:
    if config.kind != "harmful":
        raise AttackError("harmful_attack needs kind='harmful'")
    pool = eligible_facts(unlearned, splits.forget)
    runs, best, final = [], {}, {}
    subsets = {}
    for seed in config.seeds:
        try:
            attack, held = attack_subset(pool, config.p, seed)
        except ValueError as e:
            raise AttackError(f"eligible pool of {len(pool)} facts too small for p={config.p}: {e}") from None
        if {f.fact_id for f in attack} & {f.fact_id for f in held}:
            raise AttackError("attack and evaluation facts overlap")
        subsets[seed] = ([f.fact_id for f in attack], [f.fact_id for f in held])
        pairs = [f.pair(t) for f in attack for t in range(len(f.questions))]
        evaluate, retained = _evaluators(held, splits)
        top = -1.0
        for lr in config.effective_lrs():
            run, snap, end = _finetune(unlearned, pairs, lr, config, seed, evaluate, retained)
            runs.append(run)
            if run.max_fs > top:
                top, best[seed], final[seed] = run.max_fs, snap, end
    return _aggregate("harmful", runs, best, final, config, {"p": config.p, "eligible": len(pool), "subsets": subsets})


def benign_attack(
    unlearned: ModelSnapshot, benign: Sequence[BenignItem], splits: CorpusSplits, config: AttackConfig
) -> AttackReport:
    if config.kind != "benign":
        raise AttackError("benign_attack needs kind='benign'")
    if not benign:
        raise AttackError("benign corpus is empty")
    hits = benign_overlap(benign, splits.forget, splits.vocab)
    if hits:
        raise AttackError(f"benign corpus mentions forget pairs: {sorted(hits)[:3]}")
    pool = eligible_facts(unlearned, splits.forget)
    if not pool:
        raise AttackError("no eligible forget facts to evaluate")
    pairs = [b.pair() for b in benign]
    evaluate, retained = _evaluators(pool, splits)
    runs, best, final = [], {}, {}
    for seed in config.seeds:
        top = -1.0
        for lr in config.effective_lrs():
            run, snap, end = _finetune(unlearned, pairs, lr, config, seed, evaluate, retained)
            runs.append(run)
            if run.max_fs > top:
                top, best[seed], final[seed] = run.max_fs, snap, end
    return _aggregate("benign", runs, best, final, config, {"size": len(benign), "eligible": len(pool)})


SWEEP_COLUMNS = ("method", "fs", "rs", "us", "harmful_p0.1", "harmful_p0.3", "benign")


def sweep(study: Sequence[tuple[str, dict]]) -> list[dict]:
    """Rows of the comparative table from per-method scores and attack reports.

    Each entry is (method, {"scores": ScoreReport, "harmful_p0.1": AttackReport, ...}).
    """
    rows = []
    for method, parts in study:
        s = parts["scores"]
        row = {"method": method, "fs": s.fs, "rs": s.rs, "us": s.us}
        for col in SWEEP_COLUMNS[4:]:
            rep = parts.get(col)
            row[col] = None if rep is None else rep.mean_max_fs
        rows.append(row)
    return rows


def write_table(rows: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (r[c] if c == "method" else repr(float(r[c]))) for c in SWEEP_COLUMNS])

"""Forget/retain/utility scores and the logit-lens probe."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import CorpusSplits, Fact, render_answer
from .model import ModelSnapshot, answer_accuracy, make_batch, run, unembed

LENS_SITE = "residual after block, final layer norm, tied projection; last question position"


@dataclass
class ScoreReport:
    fs: float | None
    rs: float | None
    us: float | None
    sizes: dict[str, int]
    step: int

    def to_dict(self) -> dict:
        return {"fs": self.fs, "rs": self.rs, "us": self.us, "sizes": dict(self.sizes), "step": self.step}


def _maybe_accuracy(snapshot: ModelSnapshot, facts: Sequence[Fact]) -> float | None:
    return answer_accuracy(snapshot, facts) if facts else None


def score(snapshot: ModelSnapshot, splits: CorpusSplits) -> ScoreReport:
    """FS on forget, RS on test, US on utility. Empty splits give ``None``."""
    return ScoreReport(
        fs=_maybe_accuracy(snapshot, splits.forget),
        rs=_maybe_accuracy(snapshot, splits.test),
        us=_maybe_accuracy(snapshot, splits.utility),
        sizes={"forget": len(splits.forget), "test": len(splits.test), "utility": len(splits.utility)},
        step=snapshot.step,
    )


# ------------------------------------------------------------------ logit lens


def _lens_logits(snapshot: ModelSnapshot, questions: Sequence[Sequence[int]]) -> torch.Tensor:
    """(L, B, V) lens logits at each row's last question position."""
    cfg = snapshot.config
    pairs = [(q, (0,)) for q in questions]
    batch = make_batch(pairs, cfg)
    resid: list[torch.Tensor] = []
    with torch.no_grad():
        run(cfg, snapshot.params, batch.tokens, residuals=resid)
        pos = torch.as_tensor(batch.x_len - 1)
        rows = torch.arange(len(questions))
        return torch.stack([unembed(cfg, snapshot.params, r[rows, pos]) for r in resid])


def logit_lens(
    snapshot: ModelSnapshot,
    fact: Fact,
    distractor: Sequence[int],
    layers: Sequence[int] | None = None,
) -> list[bool]:
    """Per layer: does the gold first answer token outscore the distractor's?"""
    distractor = tuple(distractor)
    if distractor[0] == fact.answer[0]:
        raise ValueError("distractor must differ from the gold answer")
    layers = list(range(snapshot.config.num_layers)) if layers is None else list(layers)
    logits = _lens_logits(snapshot, [fact.question_tokens])[:, 0]
    return [bool(logits[l, fact.answer[0]] > logits[l, distractor[0]]) for l in layers]


def sample_distractors(facts: Sequence[Fact], splits: CorpusSplits, seed: int) -> list[tuple[int, ...]]:
    """One answer of the same relation per fact, never the gold one."""
    rng = np.random.default_rng(seed)
    out = []
    for f in facts:
        pool = [a for a in splits.answers_by_relation[f.relation] if a != f.object]
        if not pool:
            raise ValueError(f"relation {f.relation} has no alternative answers")
        out.append(render_answer(splits.vocab, pool[int(rng.integers(len(pool)))]))
    return out


@dataclass
class LogitLensProfile:
    accuracy: list[float]
    seed: int
    n: int
    chance: float = 0.5
    metadata: dict = field(default_factory=lambda: {"site": LENS_SITE})

    def to_rows(self) -> list[tuple[int, float]]:
        return list(enumerate(self.accuracy))

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer", "accuracy"])
            for layer, acc in self.to_rows():
                w.writerow([layer, repr(float(acc))])


def lens_profile(snapshot: ModelSnapshot, facts: Sequence[Fact], splits: CorpusSplits, seed: int) -> LogitLensProfile:
    if not facts:
        raise ValueError("lens profile needs a nonempty fact set")
    distractors = sample_distractors(facts, splits, seed)
    logits = _lens_logits(snapshot, [f.question_tokens for f in facts])
    gold = torch.tensor([f.answer[0] for f in facts])
    other = torch.tensor([d[0] for d in distractors])
    rows = torch.arange(len(facts))
    wins = logits[:, rows, gold] > logits[:, rows, other]
    return LogitLensProfile([float(v) for v in wins.double().mean(dim=1)], seed, len(facts))


def two_way_agreement(snapshot: ModelSnapshot, facts: Sequence[Fact], splits: CorpusSplits, seed: int) -> float:
    """Fraction of facts where the final-layer lens matches the model's own gold-vs-distractor choice."""
    distractors = sample_distractors(facts, splits, seed)
    cfg = snapshot.config
    batch = make_batch([(f.question_tokens, (0,)) for f in facts], cfg)
    with torch.no_grad():
        logits = run(cfg, snapshot.params, batch.tokens)
    last = logits[torch.arange(len(facts)), torch.as_tensor(batch.x_len - 1)]
    model_pick = np.array([bool(last[i, f.answer[0]] > last[i, d[0]]) for i, (f, d) in enumerate(zip(facts, distractors))])
    lens = _lens_logits(snapshot, [f.question_tokens for f in facts])[-1]
    lens_pick = np.array([bool(lens[i, f.answer[0]] > lens[i, d[0]]) for i, (f, d) in enumerate(zip(facts, distractors))])
    return float((model_pick == lens_pick).mean())

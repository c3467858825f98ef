"""Synthetic fact corpus with forget/retain/test/utility splits and a benign corpus."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

SPLITS = ("forget", "retain", "test", "utility")
PAD = "<pad>"
GLUE = ("what", "is", "the", "of", "?", "tell", "me", "'s", ":")
REJECTION = ("i", "cannot", "answer", "that", ".")
BENIGN_WORDS = (
    "repeat", "reverse", "first", "last", "count", "=>", "please", "list",
    "red", "blue", "green", "one", "two", "three", "big", "small", "and", "then",
)
TEMPLATES = (
    "what is the {relation} of {subject} ?",
    "tell me {subject} 's {relation} :",
)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise CorpusError("duplicate vocabulary entries")

    @property
    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> tuple[int, ...]:
        idx = self.index
        try:
            return tuple(idx[w] for w in text.split(" "))
        except KeyError as e:
            raise CorpusError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


@dataclass(frozen=True)
class Fact:
    fact_id: int
    subject: str
    relation: str
    object: str
    questions: tuple[tuple[int, ...], ...]
    answer: tuple[int, ...]
    split: str

    @property
    def question_tokens(self) -> tuple[int, ...]:
        return self.questions[0]

    @property
    def answer_tokens(self) -> tuple[int, ...]:
        return self.answer

    @property
    def key(self) -> tuple[str, str]:
        return (self.subject, self.relation)

    def pair(self, template: int = 0) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return self.questions[template], self.answer

    def to_record(self) -> dict:
        return {
            "fact_id": self.fact_id,
            "split": self.split,
            "subject": self.subject,
            "relation": self.relation,
            "object": self.object,
            "questions": [list(q) for q in self.questions],
            "answer": list(self.answer),
        }

    @classmethod
    def from_record(cls, r: dict) -> "Fact":
        return cls(
            r["fact_id"], r["subject"], r["relation"], r["object"],
            tuple(tuple(q) for q in r["questions"]), tuple(r["answer"]), r["split"],
        )


@dataclass
class CorpusSplits:
    forget: list[Fact]
    retain: list[Fact]
    test: list[Fact]
    utility: list[Fact]
    vocab: Vocab
    seed: int
    answers_by_relation: dict[str, list[str]] = field(default_factory=dict)

    def all_facts(self) -> list[Fact]:
        return self.forget + self.retain + self.test + self.utility

    def split(self, name: str) -> list[Fact]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def answer_tokens(self, obj: str) -> tuple[int, ...]:
        return render_answer(self.vocab, obj)

    def rejection_tokens(self) -> tuple[int, ...]:
        return self.vocab.encode(" ".join(REJECTION))

    def keys(self) -> set[tuple[str, str]]:
        return {f.key for f in self.all_facts()}


def render_answer(vocab: Vocab, obj: str) -> tuple[int, ...]:
    return vocab.encode(obj)


def render_question(template: int, subject: str, relation: str) -> str:
    return TEMPLATES[template].format(subject=subject, relation=relation)


def build_vocab(num_entities: int, num_relations: int, num_answers: int) -> Vocab:
    tokens = [PAD, *GLUE, *REJECTION, *BENIGN_WORDS]
    tokens += [f"entity-{i}" for i in range(num_entities)]
    tokens += [f"relation-{i}" for i in range(num_relations)]
    tokens += [f"ans-{i}" for i in range(num_answers)]
    return Vocab(tuple(tokens))


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int, int]:
    f, r, t = fractions
    if min(fractions) < 0 or f + r + t > 1 + 1e-12:
        raise CorpusError(f"fractions must be nonnegative and sum to <= 1, got {tuple(fractions)}")
    nf = math.floor(f * n + 1e-9)
    nr = math.floor(r * n + 1e-9)
    nt = math.floor(t * n + 1e-9)
    return nf, nr, nt, n - nf - nr - nt


def generate(
    seed: int,
    num_entities: int,
    num_relations: int,
    fractions: Sequence[float] = (0.05, 0.10, 0.70),
    values_per_relation: int | None = None,
    vocab_limit: int | None = None,
) -> CorpusSplits:
    """Deterministic corpus over every (entity, relation) pair."""
    n = num_entities * num_relations
    if n < 20:
        raise CorpusError(f"corpus must hold at least 20 facts, got {n}")
    if values_per_relation is None:
        values_per_relation = max(1, num_entities // 2)
    if num_entities < 2 * values_per_relation:
        raise CorpusError("every answer needs at least two questions: num_entities >= 2 * values_per_relation")
    num_answers = num_relations * values_per_relation
    vocab = build_vocab(num_entities, num_relations, num_answers)
    if vocab_limit is not None and len(vocab) > vocab_limit:
        raise CorpusError(f"corpus vocabulary ({len(vocab)}) exceeds model vocab_size ({vocab_limit})")
    sizes = split_sizes(n, fractions)

    rng = np.random.default_rng(seed)
    answers_by_relation: dict[str, list[str]] = {}
    raw = []
    for r in range(num_relations):
        relation = f"relation-{r}"
        values = [f"ans-{r * values_per_relation + v}" for v in range(values_per_relation)]
        answers_by_relation[relation] = values
        perm = rng.permutation(num_entities)
        for pos, e in enumerate(perm):
            raw.append((f"entity-{e}", relation, values[pos % values_per_relation]))
    raw.sort(key=lambda t: (int(t[0].split("-")[1]), int(t[1].split("-")[1])))

    order = rng.permutation(n)
    labels = np.empty(n, dtype=object)
    start = 0
    for name, size in zip(SPLITS, sizes):
        labels[order[start : start + size]] = name
        start += size

    buckets: dict[str, list[Fact]] = {s: [] for s in SPLITS}
    for fid, (subject, relation, obj) in enumerate(raw):
        questions = tuple(vocab.encode(render_question(t, subject, relation)) for t in range(len(TEMPLATES)))
        fact = Fact(fid, subject, relation, obj, questions, render_answer(vocab, obj), str(labels[fid]))
        buckets[fact.split].append(fact)
    return CorpusSplits(**buckets, vocab=vocab, seed=seed, answers_by_relation=answers_by_relation)


# ------------------------------------------------------------------ benign corpus


@dataclass(frozen=True)
class BenignItem:
    prompt: tuple[int, ...]
    response: tuple[int, ...]

    def pair(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return self.prompt, self.response


def benign_corpus(seed: int, size: int, splits: CorpusSplits) -> list[BenignItem]:
    """Instruction-like copy/reverse/select tasks over entity and filler tokens.

    Relation and answer tokens never appear, so no sequence carries a
    (subject, relation) pair or a gold answer.
    """
    if size < 0:
        raise CorpusError("benign corpus size must be nonnegative")
    vocab = splits.vocab
    idx = vocab.index
    fillers = [w for w in BENIGN_WORDS if w not in ("repeat", "reverse", "first", "last", "=>", "please")]
    entities = sorted({f.subject for f in splits.all_facts()}, key=lambda s: int(s.split("-")[1]))
    pool = [idx[w] for w in fillers] + [idx[e] for e in entities]
    rng = np.random.default_rng(seed)
    tasks = ("repeat", "reverse", "first", "last")
    items = []
    for _ in range(size):
        task = tasks[int(rng.integers(len(tasks)))]
        n = int(rng.integers(2, 5))
        payload = [pool[int(i)] for i in rng.integers(len(pool), size=n)]
        prompt = [idx["please"], idx[task], idx[":"], *payload, idx["=>"]]
        if task == "repeat":
            resp = payload
        elif task == "reverse":
            resp = payload[::-1]
        elif task == "first":
            resp = payload[:1]
        else:
            resp = payload[-1:]
        items.append(BenignItem(tuple(prompt), tuple(resp)))
    return items


def benign_overlap(items: Sequence[BenignItem], facts: Sequence[Fact], vocab: Vocab) -> set[tuple[str, str]]:
    """(subject, relation) pairs of ``facts`` that co-occur in some benign sequence."""
    keys = {f.key for f in facts}
    hits = set()
    for it in items:
        words = {vocab.tokens[t] for t in it.prompt + it.response}
        for s, r in keys:
            if s in words and r in words:
                hits.add((s, r))
    return hits


# ------------------------------------------------------------------ attack pools


def attack_subset(
    forget: Sequence[Fact],
    p: float,
    seed: int,
    eligible: Callable[[Fact], bool] | None = None,
) -> tuple[list[Fact], list[Fact]]:
    """Split eligible forget facts into ceil(p * n) attack facts and the held-out rest."""
    if not 0 < p < 1:
        raise CorpusError(f"p must lie in (0, 1), got {p}")
    pool = [f for f in forget if eligible is None or eligible(f)]
    if len(pool) < 2:
        raise CorpusError(f"need at least 2 eligible facts, got {len(pool)}")
    k = math.ceil(p * len(pool) - 1e-9)
    if k >= len(pool):
        raise CorpusError(f"p={p} leaves no held-out facts out of {len(pool)}")
    order = np.random.default_rng(seed).permutation(len(pool))
    attack = sorted((pool[i] for i in order[:k]), key=lambda f: f.fact_id)
    held = sorted((pool[i] for i in order[k:]), key=lambda f: f.fact_id)
    return attack, held


# ------------------------------------------------------------------ export / import


def export_corpus(splits: CorpusSplits, path: str | Path, benign: Sequence[BenignItem] = ()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = {
        "kind": "header",
        "seed": splits.seed,
        "vocab": list(splits.vocab.tokens),
        "answers_by_relation": splits.answers_by_relation,
    }
    lines = [json.dumps(head, sort_keys=True)]
    for f in sorted(splits.all_facts(), key=lambda f: f.fact_id):
        lines.append(json.dumps({"kind": "fact", **f.to_record()}, sort_keys=True))
    for i, it in enumerate(benign):
        lines.append(json.dumps({"kind": "benign", "id": i, "prompt": list(it.prompt), "response": list(it.response)}, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")


def import_corpus(path: str | Path) -> tuple[CorpusSplits, list[BenignItem]]:
    head = None
    buckets: dict[str, list[Fact]] = {s: [] for s in SPLITS}
    benign = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        kind = r.pop("kind")
        if kind == "header":
            head = r
        elif kind == "fact":
            fact = Fact.from_record(r)
            buckets[fact.split].append(fact)
        elif kind == "benign":
            benign.append(BenignItem(tuple(r["prompt"]), tuple(r["response"])))
        else:
            raise CorpusError(f"unknown record kind {kind!r}")
    if head is None:
        raise CorpusError(f"{path}: missing header record")
    splits = CorpusSplits(
        **buckets, vocab=Vocab(tuple(head["vocab"])), seed=head["seed"],
        answers_by_relation=head["answers_by_relation"],
    )
    return splits, benign

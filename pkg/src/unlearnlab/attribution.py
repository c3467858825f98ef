"""Activation x gradient attribution and the influence-variation analyses built on it."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from . import engine as E
from .model import MODULE_KINDS, ModelSnapshot, NeuronId, Pair, Site, make_batch, sequence_logprob

LOG_TINY = math.log(np.finfo(np.float64).tiny)

# D-minus clamps the post-unlearning attribution at min(A, 0), mirroring D-plus.
MINUS_CLAMP_NOTE = "d_minus uses min(A_after, 0) (mirror of the d_plus clamp; inferred)"


class AttributionError(ValueError):
    pass


@dataclass
class NeuronIndex:
    """Flat layout of all neurons over an ordered list of sites."""

    sites: tuple[Site, ...]
    widths: tuple[int, ...]

    @classmethod
    def for_snapshot(cls, snapshot: ModelSnapshot, sites: Iterable[Site] | None = None) -> "NeuronIndex":
        cfg = snapshot.config
        sites = tuple(sites) if sites is not None else tuple(cfg.sites())
        return cls(sites, tuple(cfg.site_width(k) for _, k in sites))

    @property
    def size(self) -> int:
        return sum(self.widths)

    def offsets(self) -> dict[Site, slice]:
        out, start = {}, 0
        for s, w in zip(self.sites, self.widths):
            out[s] = slice(start, start + w)
            start += w
        return out

    def neuron(self, flat: int) -> NeuronId:
        for (layer, kind), sl in self.offsets().items():
            if sl.start <= flat < sl.stop:
                return NeuronId(layer, kind, flat - sl.start)
        raise IndexError(flat)

    def rows(self) -> list[tuple[int, str, int]]:
        return [(l, k, u) for (l, k), w in zip(self.sites, self.widths) for u in range(w)]


@dataclass
class AttributionMap:
    pair_id: int
    token_count: int
    scores: dict[Site, np.ndarray]  # site -> (K, width)
    prob: float

    def entry(self, neuron: NeuronId) -> np.ndarray:
        return self.scores[(neuron.layer, neuron.module)][:, neuron.unit]

    def entries(self):
        for (layer, kind), arr in self.scores.items():
            for u in range(arr.shape[1]):
                yield NeuronId(layer, kind, u), arr[:, u]

    def reduce(self, index: NeuronIndex, how: str) -> np.ndarray:
        """Per-neuron token aggregate flattened in ``index`` order."""
        parts = []
        for s in index.sites:
            a = self.scores[s]
            if how == "max":
                parts.append(a.max(axis=0))
            elif how == "min":
                parts.append(a.min(axis=0))
            elif how == "absmax":
                pick = np.abs(a).argmax(axis=0)
                parts.append(a[pick, np.arange(a.shape[1])])
            else:
                raise ValueError(how)
        return np.concatenate(parts)


def input_times_gradient(fn, h: torch.Tensor) -> np.ndarray:
    """h * d fn(h) / dh for a scalar-valued ``fn``."""
    h = h.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(h), [h])
    return (h * g).detach().numpy()


def attribute_pairs(
    snapshot: ModelSnapshot,
    pairs: Sequence[Pair],
    sites: Iterable[Site] | None = None,
    pair_ids: Sequence[int] | None = None,
    chunk: int = 32,
) -> list[AttributionMap]:
    """A = h * dP(y|x)/dh at every question position of every site.

    Rows of a batch are independent, so the gradient of the summed
    probabilities yields each row's own gradient.
    """
    cfg = snapshot.config
    sites = list(sites) if sites is not None else cfg.sites()
    ids = list(pair_ids) if pair_ids is not None else list(range(len(pairs)))
    out: list[AttributionMap] = []
    for start in range(0, len(pairs), chunk):
        sub = pairs[start : start + chunk]
        batch = make_batch(sub, cfg)
        cap = E.ActivationCapture(sites)
        lp = sequence_logprob(cfg, snapshot.params, batch, capture=cap)
        bad = [ids[start + i] for i, v in enumerate(lp.detach().tolist()) if v < LOG_TINY]
        if bad:
            raise AttributionError(f"P(y|x) underflows to zero for pair(s) {bad}")
        prob = torch.exp(lp)
        grads = E.grad_wrt_activation(prob.sum(), cap, sites)
        acts = {s: cap[s].detach().numpy() for s in sites}
        for i in range(len(sub)):
            K = int(batch.x_len[i])
            scores = {s: acts[s][i, :K] * g[i, :K] for s, g in zip(sites, grads)}
            out.append(AttributionMap(ids[start + i], K, scores, float(prob[i].detach())))
    return out


def attribute(snapshot: ModelSnapshot, x: Sequence[int], y: Sequence[int], sites: Iterable[Site] | None = None) -> AttributionMap:
    return attribute_pairs(snapshot, [(x, y)], sites)[0]


def attribute_facts(snapshot: ModelSnapshot, facts: Sequence, sites=None, template: int = 0) -> list[AttributionMap]:
    return attribute_pairs(snapshot, [f.pair(template) for f in facts], sites, [f.fact_id for f in facts])


# ------------------------------------------------------------------ influence variation


@dataclass
class InfluenceVariation:
    index: NeuronIndex
    d_plus: np.ndarray
    d_minus: np.ndarray
    n: int
    metadata: dict = field(default_factory=lambda: {"minus_clamp": MINUS_CLAMP_NOTE})

    @property
    def d_plus_clamped(self) -> np.ndarray:
        return np.maximum(self.d_plus, 0.0)

    @property
    def d_minus_clamped(self) -> np.ndarray:
        return np.maximum(self.d_minus, 0.0)

    def clamped(self, direction: str) -> np.ndarray:
        if direction == "plus":
            return self.d_plus_clamped
        if direction == "minus":
            return self.d_minus_clamped
        raise ValueError(f"direction must be 'plus' or 'minus', got {direction!r}")

    def of(self, neuron: NeuronId) -> tuple[float, float]:
        sl = self.index.offsets()[(neuron.layer, neuron.module)]
        i = sl.start + neuron.unit
        return float(self.d_plus[i]), float(self.d_minus[i])


def variation_terms(before: AttributionMap, after: AttributionMap, index: NeuronIndex) -> tuple[np.ndarray, np.ndarray]:
    """Per-fact contributions to D+ and D- (before averaging)."""
    plus = before.reduce(index, "max") - np.maximum(after.reduce(index, "max"), 0.0)
    minus = before.reduce(index, "min") - np.minimum(after.reduce(index, "min"), 0.0)
    return plus, minus


def variation_from_maps(
    before: Sequence[AttributionMap], after: Sequence[AttributionMap], index: NeuronIndex
) -> InfluenceVariation:
    if not before:
        raise AttributionError("influence variation needs a nonempty forget set")
    if len(before) != len(after):
        raise AttributionError("before/after attribution lists differ in length")
    plus = np.zeros(index.size)
    minus = np.zeros(index.size)
    for b, a in zip(before, after):
        p, m = variation_terms(b, a, index)
        plus += p
        minus += m
    n = len(before)
    return InfluenceVariation(index, plus / n, minus / n, n)


def influence_variation(
    before: ModelSnapshot, after: ModelSnapshot, forget: Sequence, sites: Iterable[Site] | None = None
) -> InfluenceVariation:
    if not forget:
        raise AttributionError("influence variation needs a nonempty forget set")
    if before.config != after.config:
        raise AttributionError("snapshots do not share a configuration")
    index = NeuronIndex.for_snapshot(before, sites)
    return variation_from_maps(
        attribute_facts(before, forget, index.sites), attribute_facts(after, forget, index.sites), index
    )


def cumulative_top_m(variation: InfluenceVariation, direction: str, m_max: int) -> np.ndarray:
    """Curve of (m, sum of the m largest clamped variations), m = 0..m_max."""
    vals = variation.clamped(direction)
    if m_max > vals.size:
        raise ValueError(f"m_max={m_max} exceeds neuron count {vals.size}")
    top = np.sort(vals)[::-1][:m_max]
    return np.column_stack([np.arange(m_max + 1), np.concatenate([[0.0], np.cumsum(top)])])


def module_layer_grid(variation: InfluenceVariation, top_k: int = 100) -> dict[str, np.ndarray]:
    """Mean of each module's top-k clamped variations, grid[layer, module kind] per direction."""
    layers = sorted({l for l, _ in variation.index.sites})
    offsets = variation.index.offsets()
    out = {}
    for direction in ("plus", "minus"):
        vals = variation.clamped(direction)
        grid = np.full((len(layers), len(MODULE_KINDS)), np.nan)
        for (layer, kind), sl in offsets.items():
            v = vals[sl]
            k = min(top_k, v.size)
            grid[layers.index(layer), MODULE_KINDS.index(kind)] = np.sort(v)[::-1][:k].mean()
        out[direction] = grid
    return out


# ------------------------------------------------------------------ distributions


def aggregate_from_maps(maps: Sequence[AttributionMap], index: NeuronIndex) -> np.ndarray:
    """Mean over facts of each neuron's largest-magnitude per-token score (sign kept)."""
    if not maps:
        raise AttributionError("aggregate attribution needs a nonempty fact set")
    return np.mean([m.reduce(index, "absmax") for m in maps], axis=0)


def aggregate_attribution(snapshot: ModelSnapshot, facts: Sequence, sites=None) -> np.ndarray:
    if not facts:
        raise AttributionError("aggregate attribution needs a nonempty fact set")
    index = NeuronIndex.for_snapshot(snapshot, sites)
    return aggregate_from_maps(attribute_facts(snapshot, facts, index.sites), index)


def distribution_correlation(pre: np.ndarray, post: np.ndarray) -> float:
    """Pearson correlation; NaN when either side has zero variance."""
    pre, post = np.asarray(pre, float), np.asarray(post, float)
    if pre.shape != post.shape:
        raise ValueError(f"summaries differ in shape: {pre.shape} vs {post.shape}")
    a, b = pre - pre.mean(), post - post.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        return math.nan
    return float(np.clip((a @ b) / denom, -1.0, 1.0))


def write_neuron_table(path: str | Path, index: NeuronIndex, columns: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "module", "unit", *names])
        for i, (l, k, u) in enumerate(index.rows()):
            w.writerow([l, k, u, *(repr(float(columns[c][i])) for c in names)])

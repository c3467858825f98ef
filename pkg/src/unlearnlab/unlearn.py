"""Unlearning objectives (GA, GD, DPO, NPO, RMU, SSIUU) and the early-stopped unlearning loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import engine as E
from .model import Batch, ModelConfig, ModelSnapshot, Pair, fact_scores, make_batch, run, sequence_logprob

log = logging.getLogger(__name__)

METHODS = ("GA", "GD", "DPO", "NPO", "RMU", "SSIUU")
Params = Mapping[str, torch.Tensor]

# Lowest Adam rate per method that reaches FS = 0 within 300 steps on the 200-fact corpus.
DEFAULT_RATES: dict[str, dict] = {
    "GA": {"learning_rate": 3e-5},
    "GD": {"learning_rate": 1e-4},
    "DPO": {"learning_rate": 3e-4},
    "NPO": {"learning_rate": 1e-4},
    "RMU": {"learning_rate": 1e-3, "rmu_alpha": 10.0},
    "SSIUU": {"learning_rate": 1e-4, "lam": 0.01},
}


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "GD"
    learning_rate: float = 1e-4
    forget_threshold: float = 0.0
    max_steps: int = 300
    lam: float = 0.01
    beta: float = 0.1
    rmu_alpha: float = 10.0
    rmu_c: float = 20.0
    rmu_layer: int = 1
    batch_size: int = 0  # 0 = whole forget set per step
    seed: int = 0
    attribution_level: str = "parameter"
    grad_clip: float = 0.0  # global L2 clip on each step's gradient; 0 disables
    optimizer: str = "adam"
    train_templates: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.max_steps < 0 or self.batch_size < 0:
            raise ValueError("max_steps and batch_size must be nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.attribution_level not in ("parameter", "activation"):
            raise ValueError("attribution_level must be 'parameter' or 'activation'")
        if not self.train_templates or min(self.train_templates) < 0:
            raise ValueError("train_templates must be a nonempty list of template indices")
        object.__setattr__(self, "train_templates", tuple(int(t) for t in self.train_templates))

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ losses


def _logp(config: ModelConfig, params: Params, batch: Batch) -> torch.Tensor:
    return sequence_logprob(config, params, batch)


def nll_loss(config: ModelConfig, params: Params, batch: Batch | None) -> torch.Tensor:
    if batch is None:
        return torch.zeros(())
    return -_logp(config, params, batch).mean()


def ga_loss(config: ModelConfig, params: Params, forget: Batch) -> torch.Tensor:
    """Mean log P(y|x) on the forget batch; descending it ascends the NLL."""
    if forget is None or forget.size == 0:
        raise ValueError("ga_loss: empty forget batch")
    return _logp(config, params, forget).mean()


def gd_loss(config: ModelConfig, params: Params, forget: Batch, retain: Batch | None) -> torch.Tensor:
    return ga_loss(config, params, forget) + nll_loss(config, params, retain)


def _check_reference(config: ModelConfig, params: Params, ref: Params) -> None:
    if set(params) != set(ref) or any(params[k].shape != ref[k].shape for k in params):
        raise ValueError("reference model does not match the policy's parameter schema")


def dpo_loss(
    config: ModelConfig,
    params: Params,
    ref: Params,
    forget: Batch,
    rejection: Batch,
    retain: Batch | None,
    beta: float,
) -> torch.Tensor:
    """Prefer the rejection response over the gold answer, relative to a frozen reference."""
    _check_reference(config, params, ref)
    with torch.no_grad():
        ref_w = _logp(config, ref, rejection)
        ref_l = _logp(config, ref, forget)
    margin = (_logp(config, params, rejection) - ref_w) - (_logp(config, params, forget) - ref_l)
    contrast = -F.logsigmoid(beta * margin).mean()
    return contrast + nll_loss(config, params, retain)


def npo_loss(
    config: ModelConfig, params: Params, ref: Params, forget: Batch, retain: Batch | None, beta: float
) -> torch.Tensor:
    _check_reference(config, params, ref)
    if beta <= 0:
        raise ValueError("npo_loss: beta must be positive")
    with torch.no_grad():
        ref_lp = _logp(config, ref, forget)
    ratio = _logp(config, params, forget) - ref_lp
    forget_term = -(2.0 / beta) * F.logsigmoid(-beta * ratio).mean()
    return forget_term + nll_loss(config, params, retain)


def hidden_at(config: ModelConfig, params: Params, batch: Batch, layer: int) -> torch.Tensor:
    """Residual stream after block ``layer`` at question positions, (N, d)."""
    if not 0 <= layer < config.num_layers:
        raise ValueError(f"layer {layer} out of range for {config.num_layers} layers")
    resid: list[torch.Tensor] = []
    run(config, params, batch.tokens, residuals=resid)
    h = resid[layer]
    T = batch.tokens.shape[1]
    mask = torch.arange(T).unsqueeze(0) < torch.as_tensor(batch.x_len).unsqueeze(1)
    return h[mask]


def rmu_direction(config: ModelConfig, seed: int) -> torch.Tensor:
    u = np.random.default_rng(seed).random(config.d_model)
    return torch.from_numpy(u / np.linalg.norm(u))


def rmu_loss(
    config: ModelConfig,
    params: Params,
    frozen: Params,
    forget: Batch,
    retain: Batch | None,
    alpha: float,
    c: float,
    layer: int,
    direction: torch.Tensor,
) -> torch.Tensor:
    h_f = hidden_at(config, params, forget, layer)
    target = c * direction
    loss = ((h_f - target) ** 2).mean()
    if retain is not None and alpha:
        with torch.no_grad():
            h_ref = hidden_at(config, frozen, retain, layer)
        loss = loss + alpha * ((hidden_at(config, params, retain, layer) - h_ref) ** 2).mean()
    return loss


# ------------------------------------------------------------------ SSIUU


def parameter_attribution(
    config: ModelConfig, params: Params, pair: Pair, create_graph: bool = False
) -> dict[str, torch.Tensor]:
    """theta_i * dP(y|x)/dtheta_i for every parameter entry."""
    names = list(params)
    batch = make_batch([pair], config)
    prob = torch.exp(sequence_logprob(config, params, batch)[0])
    grads = torch.autograd.grad(prob, [params[n] for n in names], create_graph=create_graph, allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        if g is None:
            g = torch.zeros_like(params[n])
        out[n] = params[n] * g if create_graph else (params[n] * g).detach()
    return out


def activation_attribution(
    config: ModelConfig, params: Params, pair: Pair, create_graph: bool = False
) -> dict[str, torch.Tensor]:
    """h * dP(y|x)/dh for every module-site neuron at the question positions."""
    sites = list(config.sites())
    cap = E.ActivationCapture(sites)
    prob = torch.exp(sequence_logprob(config, params, make_batch([pair], config), capture=cap)[0])
    grads = torch.autograd.grad(prob, [cap[s] for s in sites], create_graph=create_graph, allow_unused=True)
    k = len(pair[0])
    out = {}
    for s, g in zip(sites, grads):
        h = cap[s][0, :k]
        a = h * (torch.zeros_like(h) if g is None else g[0, :k])
        out[f"{s[0]}.{s[1]}"] = a if create_graph else a.detach()
    return out


ATTRIBUTORS = {"parameter": parameter_attribution, "activation": activation_attribution}


def negative_index_set(snapshot: ModelSnapshot, x: Sequence[int], y: Sequence[int]) -> dict[str, np.ndarray]:
    """Per-parameter boolean masks of entries whose attribution is negative."""
    params = snapshot.working_copy()
    attr = parameter_attribution(snapshot.config, params, (x, y))
    return {n: (a < 0).numpy() for n, a in attr.items()}


def attribution_gap(
    current: Mapping[str, torch.Tensor], previous: Mapping[str, torch.Tensor]
) -> torch.Tensor:
    """L2 norm of (previous - current) over entries negative under ``current``."""
    cur = torch.cat([a.reshape(-1) for a in current.values()])
    prev = torch.cat([previous[n].detach().reshape(-1) for n in current])
    mask = cur.detach() < 0
    if not bool(mask.any()):
        return torch.zeros(())
    return E.l2_norm((prev - cur)[mask])


def ssiuu_regularizer(
    config: ModelConfig,
    params: Params,
    pairs: Sequence[Pair],
    previous: Sequence[Mapping[str, torch.Tensor]],
    level: str = "parameter",
) -> tuple[torch.Tensor, list[dict[str, torch.Tensor]]]:
    """Sum over facts of the masked attribution gap. Also returns the current attributions, detached."""
    attribute = ATTRIBUTORS[level]
    total = torch.zeros(())
    current = []
    for pair, prev in zip(pairs, previous):
        cur = attribute(config, params, pair, create_graph=True)
        total = total + attribution_gap(cur, prev)
        current.append({n: a.detach() for n, a in cur.items()})
    return total, current


def ssiuu_loss(
    config: ModelConfig,
    params: Params,
    previous: Sequence[Mapping[str, torch.Tensor]],
    forget_pairs: Sequence[Pair],
    retain: Batch | None,
    lam: float,
    scale: float = 1.0,
    level: str = "parameter",
) -> tuple[torch.Tensor, torch.Tensor, list[dict[str, torch.Tensor]]]:
    """GD backbone plus lam * scale * regularizer. Returns (loss, regularizer, current attributions)."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    base = gd_loss(config, params, make_batch(forget_pairs, config), retain)
    if lam == 0:
        return base, torch.zeros(()), []
    reg, current = ssiuu_regularizer(config, params, forget_pairs, previous, level)
    return base + lam * scale * reg, reg, current


# ------------------------------------------------------------------ unlearning loop


@dataclass
class StepRecord:
    step: int
    fs: float
    rs_retain: float
    loss: float = math.nan
    unlearn_term: float = math.nan
    retain_term: float = math.nan
    reg_term: float = math.nan


@dataclass
class UnlearnTrace:
    steps: list[StepRecord] = field(default_factory=list)
    stop_step: int = 0
    stop_reason: str = "max-steps"
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stop_step": self.stop_step,
            "stop_reason": self.stop_reason,
            "metadata": self.metadata,
            "steps": [asdict(s) for s in self.steps],
        }


class Unlearner:
    """Holds batches, references and caches for one unlearning run."""

    def __init__(self, snapshot: ModelSnapshot, splits, config: UnlearnConfig):
        self.config = config
        self.mc = snapshot.config
        self.snapshot = snapshot
        self.splits = splits
        if not splits.forget:
            raise ValueError("forget split is empty")
        ts = config.train_templates
        self.forget_pairs = [f.pair(t) for f in splits.forget for t in ts if t < len(f.questions)]
        self.retain_pairs = [f.pair(t) for f in splits.retain for t in ts if t < len(f.questions)]
        self.rejection = splits.rejection_tokens()
        self.ref = {k: v.detach().clone() for k, v in snapshot.params.items()}
        self.rng = np.random.default_rng(config.seed)
        if config.method == "RMU":
            self.direction = rmu_direction(self.mc, config.seed)
            if not 0 <= config.rmu_layer < self.mc.num_layers:
                raise ValueError(f"rmu_layer {config.rmu_layer} out of range")
        self._attr_cache: dict[int, tuple[int, dict[str, torch.Tensor]]] = {}
        self._prev_params: dict[str, torch.Tensor] | None = None

    def _forget_indices(self) -> np.ndarray:
        n = len(self.forget_pairs)
        bs = self.config.batch_size or n
        if bs >= n:
            return np.arange(n)
        return np.sort(self.rng.choice(n, size=bs, replace=False))

    def _retain_batch(self, size: int) -> Batch | None:
        if not self.retain_pairs:
            return None
        n = len(self.retain_pairs)
        bs = self.config.batch_size or n
        if bs >= n:
            idx = np.arange(n)
        else:
            idx = np.sort(self.rng.choice(n, size=bs, replace=False))
        return make_batch([self.retain_pairs[i] for i in idx], self.mc)

    def _previous_attr(self, fact_idx: int, step: int, params) -> dict[str, torch.Tensor]:
        hit = self._attr_cache.get(fact_idx)
        if hit is not None and hit[0] == step - 1:
            return hit[1]
        # step 0 uses the pre-unlearning snapshot as theta^{t-1}
        source = self._prev_params if step > 0 and self._prev_params is not None else params
        work = {k: v.detach().clone().requires_grad_(True) for k, v in source.items()}
        return ATTRIBUTORS[self.config.attribution_level](self.mc, work, self.forget_pairs[fact_idx])

    def loss(self, params, step: int) -> tuple[torch.Tensor, dict]:
        cfg = self.config
        idx = self._forget_indices()
        pairs = [self.forget_pairs[i] for i in idx]
        forget = make_batch(pairs, self.mc)
        retain = self._retain_batch(len(idx))
        terms: dict = {}
        m = cfg.method
        if m == "GA":
            loss = ga_loss(self.mc, params, forget)
            terms["unlearn_term"] = float(loss.detach())
        elif m == "GD":
            u = ga_loss(self.mc, params, forget)
            r = nll_loss(self.mc, params, retain)
            loss = u + r
            terms.update(unlearn_term=float(u.detach()), retain_term=float(r.detach()))
        elif m == "DPO":
            rej = make_batch([(x, self.rejection) for x, _ in pairs], self.mc)
            loss = dpo_loss(self.mc, params, self.ref, forget, rej, retain, cfg.beta)
            r = float(nll_loss(self.mc, params, retain).detach())
            terms.update(unlearn_term=float(loss.detach()) - r, retain_term=r)
        elif m == "NPO":
            loss = npo_loss(self.mc, params, self.ref, forget, retain, cfg.beta)
            r = float(nll_loss(self.mc, params, retain).detach())
            terms.update(unlearn_term=float(loss.detach()) - r, retain_term=r)
        elif m == "RMU":
            loss = rmu_loss(self.mc, params, self.ref, forget, retain, cfg.rmu_alpha, cfg.rmu_c, cfg.rmu_layer, self.direction)
            terms["unlearn_term"] = float(loss.detach())
        else:
            prev = [self._previous_attr(int(i), step, params) for i in idx]
            scale = len(self.forget_pairs) / len(idx)
            loss, reg, current = ssiuu_loss(self.mc, params, prev, pairs, retain, cfg.lam, scale, cfg.attribution_level)
            for i, cur in zip(idx, current):
                self._attr_cache[int(i)] = (step, cur)
            u = float(ga_loss(self.mc, params, forget).detach())
            r = float(nll_loss(self.mc, params, retain).detach())
            terms.update(unlearn_term=u, retain_term=r, reg_term=float(reg.detach()))
        return loss, terms

    def run(self) -> tuple[ModelSnapshot, UnlearnTrace]:
        cfg = self.config
        params = self.snapshot.working_copy()
        trace = UnlearnTrace(metadata={
            "method": cfg.method,
            "learning_rate": cfg.learning_rate,
            "optimizer": cfg.optimizer,
            "regularizer_scope": "per-batch, scaled by |forget| / |batch|",
            "attribution_level": cfg.attribution_level,
        })
        forget, retain = self.splits.forget, self.splits.retain
        step = 0
        last_good = {k: v.detach().clone() for k, v in params.items()}
        adam = torch.optim.Adam(list(params.values()), lr=cfg.learning_rate) if cfg.optimizer == "adam" else None
        while True:
            snap = self.snapshot.replace(params)
            fs = float(fact_scores(snap, forget).mean())
            rs = float(fact_scores(snap, retain).mean()) if retain else math.nan
            rec = StepRecord(step, fs, rs)
            trace.steps.append(rec)
            if fs <= cfg.forget_threshold:
                trace.stop_reason = "threshold-reached"
                break
            if step >= cfg.max_steps:
                trace.stop_reason = "max-steps"
                break
            loss, terms = self.loss(params, step)
            rec.loss = float(loss.detach())
            for k, v in terms.items():
                setattr(rec, k, v)
            if not math.isfinite(rec.loss):
                trace.stop_reason = "diverged"
                params = last_good
                break
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            if any(g is not None and not bool(torch.isfinite(g).all()) for g in grads):
                trace.stop_reason = "diverged"
                break
            self._prev_params = {k: v.detach().clone() for k, v in params.items()}
            rate = cfg.learning_rate
            if cfg.grad_clip > 0:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
                if norm > cfg.grad_clip:
                    rate *= cfg.grad_clip / norm
            if adam is not None:
                for p, g in zip(params.values(), grads):
                    p.grad = None if g is None else g * (rate / cfg.learning_rate)
                adam.step()
            else:
                with torch.no_grad():
                    for p, g in zip(params.values(), grads):
                        if g is not None:
                            p -= rate * g
            last_good = {k: v.detach().clone() for k, v in params.items()}
            step += 1
        trace.stop_step = step
        log.info("%s stopped at step %d (%s), FS %.3f", cfg.method, step, trace.stop_reason, trace.steps[-1].fs)
        return self.snapshot.replace(params, self.snapshot.step + step), trace


def unlearn(snapshot: ModelSnapshot, splits, config: UnlearnConfig) -> tuple[ModelSnapshot, UnlearnTrace]:
    return Unlearner(snapshot, splits, config).run()


def lowest_converging_lr(
    snapshot: ModelSnapshot, splits, config: UnlearnConfig, learning_rates: Sequence[float]
) -> tuple[float, ModelSnapshot, UnlearnTrace]:
    """First learning rate, in ascending order, whose run reaches the forget threshold."""
    from dataclasses import replace

    result = None
    for lr in sorted(learning_rates):
        out, trace = unlearn(snapshot, splits, replace(config, learning_rate=lr))
        result = (lr, out, trace)
        if trace.stop_reason == "threshold-reached":
            return result
    if result is None:
        raise ValueError("no learning rates given")
    return result

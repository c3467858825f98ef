"""Small decoder-only transformer with named per-module activation sites.

The model is written functionally over a ``{name: tensor}`` parameter map so
that losses can differentiate through parameter-level attributions (SSIUU)
and so snapshots stay plain data.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from . import engine as E

log = logging.getLogger(__name__)

MODULE_KINDS = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_in", "mlp_out")
CHECKPOINT_MAGIC = b"ULCKPT01"

Pair = tuple[Sequence[int], Sequence[int]]
Site = tuple[int, str]


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    d_model: int = 128
    num_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 256
    max_seq_len: int = 32
    init_seed: int = 0
    tie_embeddings: bool = True

    def __post_init__(self):
        for name in ("num_layers", "d_model", "num_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")

    def site_width(self, kind: str) -> int:
        if kind not in MODULE_KINDS:
            raise ValueError(f"unknown module kind {kind!r}")
        return self.d_ff if kind == "mlp_in" else self.d_model

    def sites(self) -> list[Site]:
        return [(layer, kind) for layer in range(self.num_layers) for kind in MODULE_KINDS]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, order=True)
class NeuronId:
    layer: int
    module: str
    unit: int


def neuron_ids(config: ModelConfig, sites: Iterable[Site] | None = None) -> list[NeuronId]:
    """Canonical neuron order: layer, module kind, unit."""
    out = []
    for layer, kind in sites if sites is not None else config.sites():
        out.extend(NeuronId(layer, kind, u) for u in range(config.site_width(kind)))
    return out


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for m in ("q", "k", "v", "o"):
            shapes[p + f"attn.{m}"] = (d, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.in"] = (d, ff)
        shapes[p + "mlp.out"] = (ff, d)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    if not config.tie_embeddings:
        shapes["unembed"] = (d, config.vocab_size)
    return shapes


def init_params(config: ModelConfig) -> dict[str, torch.Tensor]:
    rng = np.random.default_rng(config.init_seed)
    resid_scale = 1.0 / math.sqrt(2 * config.num_layers)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            arr = rng.normal(0.0, 0.1, size=shape)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if name.endswith("attn.o") or name.endswith("mlp.out"):
                std *= resid_scale
            arr = rng.normal(0.0, std, size=shape)
        params[name] = torch.from_numpy(arr)
    return params


@dataclass
class ModelSnapshot:
    config: ModelConfig
    params: dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def initial(cls, config: ModelConfig) -> "ModelSnapshot":
        return cls(config, init_params(config), 0)

    def working_copy(self) -> dict[str, torch.Tensor]:
        """Fresh leaf tensors with requires_grad, safe to mutate."""
        return {k: v.detach().clone().requires_grad_(True) for k, v in self.params.items()}

    def replace(self, params: Mapping[str, torch.Tensor], step: int | None = None) -> "ModelSnapshot":
        frozen = {k: v.detach().clone() for k, v in params.items()}
        return ModelSnapshot(self.config, frozen, self.step if step is None else step)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].detach().numpy().ravel() for k in self.params])

    def equal(self, other: "ModelSnapshot") -> bool:
        return self.config == other.config and all(
            torch.equal(self.params[k], other.params[k]) for k in self.params
        )


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    tokens: torch.Tensor  # (B, T) input ids, x ++ y[:-1], right-padded
    x_len: np.ndarray
    y: list[tuple[int, ...]]
    y_pos: torch.Tensor  # (B, Ymax) logit positions predicting y tokens
    y_ids: torch.Tensor  # (B, Ymax)
    y_mask: torch.Tensor  # (B, Ymax) bool

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def make_batch(pairs: Sequence[Pair], config: ModelConfig) -> Batch:
    if not pairs:
        raise ValueError("empty batch")
    rows, x_len, ys = [], [], []
    for x, y in pairs:
        x, y = tuple(int(t) for t in x), tuple(int(t) for t in y)
        if not x or not y:
            raise ValueError("question and answer must be nonempty")
        seq = x + y[:-1]
        if len(seq) > config.max_seq_len:
            raise ValueError(f"sequence length {len(seq)} exceeds max_seq_len={config.max_seq_len}")
        if min(x + y) < 0 or max(x + y) >= config.vocab_size:
            raise ValueError(f"unknown token id (vocab_size={config.vocab_size})")
        rows.append(seq)
        x_len.append(len(x))
        ys.append(y)
    width = max(len(r) for r in rows)
    ymax = max(len(y) for y in ys)
    # built as padded lists, one tensor each
    tokens = torch.tensor([list(r) + [0] * (width - len(r)) for r in rows], dtype=torch.long)
    y_pos = torch.tensor([[xl - 1 + j for j in range(ymax)] for xl in x_len], dtype=torch.long)
    y_ids = torch.tensor([list(y) + [0] * (ymax - len(y)) for y in ys], dtype=torch.long)
    y_mask = torch.tensor([[j < len(y) for j in range(ymax)] for y in ys], dtype=torch.bool)
    y_pos = y_pos.masked_fill(~y_mask, 0)
    return Batch(tokens, np.array(x_len), ys, y_pos, y_ids, y_mask)


# ------------------------------------------------------------------ forward

Patch = Mapping[Site, Callable[[torch.Tensor], torch.Tensor]]


def run(
    config: ModelConfig,
    params: Mapping[str, torch.Tensor],
    tokens: torch.Tensor,
    capture: E.ActivationCapture | None = None,
    patch: Patch | None = None,
    residuals: list | None = None,
) -> torch.Tensor:
    """Logits (B, T, V). Residual stream after each block is appended to ``residuals``."""
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    B, T = tokens.shape
    if T > config.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len={config.max_seq_len}")
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= config.vocab_size):
        raise ValueError(f"unknown token id (vocab_size={config.vocab_size})")

    def site(layer: int, kind: str, value: torch.Tensor) -> torch.Tensor:
        key = (layer, kind)
        if patch is not None and key in patch:
            value = patch[key](value)
        if capture is not None:
            value = capture.record(key, value)
        return value

    H = config.num_heads
    dh = config.d_model // H
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    x = E.add(E.embedding(params["tok_emb"], tokens), params["pos_emb"][:T])
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        h = E.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = site(layer, "attn_q", E.matmul(h, params[p + "attn.q"]))
        k = site(layer, "attn_k", E.matmul(h, params[p + "attn.k"]))
        v = site(layer, "attn_v", E.matmul(h, params[p + "attn.v"]))
        qh = q.view(B, T, H, dh).transpose(1, 2)
        kh = k.view(B, T, H, dh).transpose(1, 2)
        vh = v.view(B, T, H, dh).transpose(1, 2)
        scores = E.matmul(qh, kh.transpose(-1, -2)) / math.sqrt(dh)
        attn = E.matmul(E.softmax(scores, causal), vh)
        attn = attn.transpose(1, 2).reshape(B, T, config.d_model)
        o = site(layer, "attn_o", E.matmul(attn, params[p + "attn.o"]))
        x = E.add(x, o)
        h = E.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        m = site(layer, "mlp_in", E.gelu(E.matmul(h, params[p + "mlp.in"])))
        out = site(layer, "mlp_out", E.matmul(m, params[p + "mlp.out"]))
        x = E.add(x, out)
        if residuals is not None:
            residuals.append(x)
    return unembed(config, params, x)


def unembed(config: ModelConfig, params: Mapping[str, torch.Tensor], resid: torch.Tensor) -> torch.Tensor:
    """Final layer-norm then projection onto the vocabulary."""
    h = E.layer_norm(resid, params["ln_f.g"], params["ln_f.b"])
    w = params["tok_emb"].T if config.tie_embeddings else params["unembed"]
    return E.matmul(h, w)


def forward(
    snapshot: ModelSnapshot, tokens: Sequence[int], capture: Iterable[Site] = ()
) -> tuple[np.ndarray, dict[Site, np.ndarray]]:
    """Logits per position and per-token captured activations for one sequence."""
    cap = E.ActivationCapture(capture, track_grad=False)
    ids = torch.as_tensor(list(tokens), dtype=torch.long).unsqueeze(0)
    with torch.no_grad():
        logits = run(snapshot.config, snapshot.params, ids, cap if cap.sites else None)
    acts = {s: v[0].numpy().copy() for s, v in cap.values.items()}
    return logits[0].numpy().copy(), acts


def answer_logprobs(
    config: ModelConfig,
    params: Mapping[str, torch.Tensor],
    batch: Batch,
    capture: E.ActivationCapture | None = None,
    patch: Patch | None = None,
) -> torch.Tensor:
    """Log-distributions at the answer positions, (B, Ymax, V)."""
    logits = run(config, params, batch.tokens, capture, patch)
    idx = batch.y_pos.unsqueeze(-1).expand(-1, -1, logits.shape[-1])
    return E.log_softmax(logits.gather(1, idx))


def sequence_logprob(
    config: ModelConfig,
    params: Mapping[str, torch.Tensor],
    batch: Batch,
    capture: E.ActivationCapture | None = None,
    patch: Patch | None = None,
) -> torch.Tensor:
    """log P(y | x) per row, summed over answer tokens."""
    lp = answer_logprobs(config, params, batch, capture, patch)
    tok = lp.gather(-1, batch.y_ids.unsqueeze(-1)).squeeze(-1)
    return (tok * batch.y_mask).sum(dim=1)


def lm_loss(config: ModelConfig, params: Mapping[str, torch.Tensor], batch: Batch, smoothing: float = 0.0) -> torch.Tensor:
    """Mean over rows of the summed answer-token NLL, optionally label-smoothed."""
    lp = answer_logprobs(config, params, batch)
    gold = lp.gather(-1, batch.y_ids.unsqueeze(-1)).squeeze(-1)
    per_tok = -gold if smoothing == 0 else -(1 - smoothing) * gold - smoothing * lp.mean(dim=-1)
    return (per_tok * batch.y_mask).sum(dim=1).mean()


def sequence_prob(snapshot: ModelSnapshot, x: Sequence[int], y: Sequence[int]) -> tuple[float, float]:
    """(P(y|x), log P(y|x)) as the product of per-token conditionals."""
    batch = make_batch([(x, y)], snapshot.config)
    with torch.no_grad():
        lp = float(sequence_logprob(snapshot.config, snapshot.params, batch)[0])
    return math.exp(lp), lp


def token_logprobs(snapshot: ModelSnapshot, x: Sequence[int], y: Sequence[int]) -> np.ndarray:
    batch = make_batch([(x, y)], snapshot.config)
    with torch.no_grad():
        logits = run(snapshot.config, snapshot.params, batch.tokens)
        lp = torch.log_softmax(logits[0], dim=-1)
    return np.array([float(lp[batch.y_pos[0, j], t]) for j, t in enumerate(y)])


def answers_correct(config: ModelConfig, params: Mapping[str, torch.Tensor], pairs: Sequence[Pair]) -> np.ndarray:
    """Greedy exact match per pair.

    Greedy decoding reproduces the gold answer iff the argmax under the gold
    prefix equals the gold token at every answer position, so one
    teacher-forced pass decides it.
    """
    if not pairs:
        return np.zeros(0, dtype=bool)
    batch = make_batch(pairs, config)
    with torch.no_grad():
        logits = run(config, params, batch.tokens)
    idx = batch.y_pos.unsqueeze(-1).expand(-1, -1, logits.shape[-1])
    pred = logits.gather(1, idx).argmax(dim=-1)
    ok = (pred == batch.y_ids) | ~batch.y_mask
    return ok.all(dim=1).numpy()


def fact_scores(snapshot: ModelSnapshot, facts: Sequence, templates: Sequence[int] | None = None) -> np.ndarray:
    """Per-fact fraction of question templates answered exactly."""
    if not facts:
        return np.zeros(0)
    pairs, owner = [], []
    for i, f in enumerate(facts):
        for t in templates if templates is not None else range(len(f.questions)):
            pairs.append((f.questions[t], f.answer))
            owner.append(i)
    ok = answers_correct(snapshot.config, snapshot.params, pairs)
    sums = np.bincount(owner, weights=ok.astype(float), minlength=len(facts))
    counts = np.bincount(owner, minlength=len(facts))
    return sums / counts


def answer_accuracy(snapshot: ModelSnapshot, facts: Sequence, templates: Sequence[int] | None = None) -> float:
    if not facts:
        raise ValueError("answer_accuracy needs a nonempty fact set")
    return float(fact_scores(snapshot, facts, templates).mean())


# ------------------------------------------------------------------ pretraining


@dataclass(frozen=True)
class PretrainSettings:
    learning_rate: float = 3e-3
    batch_size: int = 64
    max_steps: int = 3000
    eval_every: int = 100
    threshold: float = 1.0
    min_steps: int = 400  # keep training past the threshold until this many steps
    seed: int = 0
    label_smoothing: float = 0.0
    weight_decay: float = 0.0


@dataclass
class PretrainResult:
    snapshot: ModelSnapshot
    steps: int
    accuracy: float
    reached: bool
    losses: list[float] = field(default_factory=list)


class DivergenceError(RuntimeError):
    pass


def pretrain(snapshot: ModelSnapshot, pairs: Sequence[Pair], settings: PretrainSettings = PretrainSettings()) -> PretrainResult:
    """Memorize ``pairs`` with Adam until greedy exact-match accuracy reaches the threshold."""
    if not pairs:
        raise ValueError("pretrain needs a nonempty corpus")
    config = snapshot.config
    if settings.max_steps == 0:
        acc = float(answers_correct(config, snapshot.params, pairs).mean())
        return PretrainResult(snapshot, 0, acc, acc >= settings.threshold)
    params = snapshot.working_copy()
    opt = torch.optim.AdamW(list(params.values()), lr=settings.learning_rate, weight_decay=settings.weight_decay)
    rng = np.random.default_rng(settings.seed)
    n = len(pairs)
    bs = min(settings.batch_size, n)
    order = rng.permutation(n)
    cursor = 0
    losses = []
    acc = 0.0
    step = 0
    while step < settings.max_steps:
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + bs]
        cursor += bs
        batch = make_batch([pairs[i] for i in idx], config)
        opt.zero_grad(set_to_none=True)
        loss = lm_loss(config, params, batch, settings.label_smoothing)
        if not torch.isfinite(loss):
            raise DivergenceError(f"pretraining loss became non-finite at step {step}")
        loss.backward()
        opt.step()
        step += 1
        losses.append(float(loss.detach()))
        if step % settings.eval_every == 0 or step == settings.max_steps:
            acc = float(_chunked_correct(config, params, pairs).mean())
            log.info("pretrain step %d loss %.4f acc %.4f", step, losses[-1], acc)
            if acc >= settings.threshold and step >= settings.min_steps:
                break
    out = snapshot.replace(params, snapshot.step + step)
    reached = acc >= settings.threshold
    if not reached:
        log.warning("pretraining stopped at %d steps with accuracy %.4f < %.4f", step, acc, settings.threshold)
    return PretrainResult(out, step, acc, reached, losses)


def _chunked_correct(config, params, pairs, chunk: int = 256) -> np.ndarray:
    with torch.no_grad():
        return np.concatenate(
            [answers_correct(config, params, pairs[i : i + chunk]) for i in range(0, len(pairs), chunk)]
        )


# ------------------------------------------------------------------ checkpoints
#
# magic | u64 manifest length | manifest JSON | tensor blocks in manifest order


def save_checkpoint(snapshot: ModelSnapshot, path: str | Path) -> None:
    names = list(snapshot.params)
    manifest = {"version": 1, "config": snapshot.config.to_dict(), "step": snapshot.step, "params": names}
    blob = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in names:
            E.write_tensor(f, snapshot.params[name])
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> ModelSnapshot:
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (n,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(n))
        if manifest.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        config = ModelConfig(**manifest["config"])
        params = {name: E.read_tensor(f) for name in manifest["params"]}
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in params or tuple(params[name].shape) != shape:
            raise ValueError(f"{path}: parameter {name} missing or misshapen")
    return ModelSnapshot(config, params, manifest["step"])

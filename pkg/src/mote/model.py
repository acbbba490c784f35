"""A small decoder-only transformer with DeepSeekMoE-shaped feed-forward blocks.

Each layer is single-head causal self-attention followed by an MoE block made
of one always-on shared expert and ``n_routed_experts`` routed experts, of
which the router picks ``top_k`` per token. Routed experts are evaluated only
on the tokens that selected them, so an expert that is not selected (or is
suppressed) has no arithmetic influence on the output at all.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._io import atomic_write_bytes
from .exceptions import ConfigurationError, InputError, NumericError
from .routing import GateDecision, TuningConfig, override_batch, route_batch

CHECKPOINT_FORMAT = "mote-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    seq_len_max: int = 16
    d_model: int = 64
    n_layers: int = 6
    n_routed_experts: int = 32
    n_shared_experts: int = 1
    top_k: int = 4
    d_expert_hidden: int = 32
    routed_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ModelConfig":
        dims = ("seq_len_max", "d_model", "n_layers", "n_routed_experts", "top_k", "d_expert_hidden")
        for name in dims:
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size < 4:
            raise ConfigurationError("vocab_size must be at least 4")
        if self.n_shared_experts != 1:
            raise ConfigurationError("exactly one shared expert is supported")
        if not 1 <= self.top_k <= self.n_routed_experts:
            raise ConfigurationError(
                f"top_k={self.top_k} must lie in [1, n_routed_experts={self.n_routed_experts}]"
            )
        return self

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`MoETransformer`."""
    d, h, E, V = cfg.d_model, cfg.d_expert_hidden, cfg.n_routed_experts, cfg.vocab_size
    expert = d * h + h + h * d + d
    per_layer = 2 * d + 4 * d * d + 2 * d + d * E + expert + E * expert
    return V * d + cfg.seq_len_max * d + cfg.n_layers * per_layer + 2 * d + d * V


class ModelOutput(NamedTuple):
    logits: torch.Tensor  # (B, T, V)
    expert_ids: torch.Tensor  # (L, B, T, k), -1 marks a removed slot
    gate_weights: torch.Tensor  # (L, B, T, k)
    router_probs: list  # L tensors of shape (B, T, E); full softmax, for the balance loss


class MoELayer(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        d, h, E = cfg.d_model, cfg.d_expert_hidden, cfg.n_routed_experts
        self.k = cfg.top_k
        self.routed_scale = cfg.routed_scale

        def normal(*shape, std):
            return nn.Parameter(torch.randn(*shape, generator=gen) * std)

        self.ln1 = nn.LayerNorm(d)
        self.wq = normal(d, d, std=d**-0.5)
        self.wk = normal(d, d, std=d**-0.5)
        self.wv = normal(d, d, std=d**-0.5)
        self.wo = normal(d, d, std=d**-0.5 / math.sqrt(2 * cfg.n_layers))
        self.ln2 = nn.LayerNorm(d)
        self.router = normal(d, E, std=d**-0.5)
        self.shared_w1 = normal(d, h, std=d**-0.5)
        self.shared_b1 = nn.Parameter(torch.zeros(h))
        self.shared_w2 = normal(h, d, std=h**-0.5 / math.sqrt(2 * cfg.n_layers))
        self.shared_b2 = nn.Parameter(torch.zeros(d))
        self.w1 = normal(E, d, h, std=d**-0.5)
        self.b1 = nn.Parameter(torch.zeros(E, h))
        self.w2 = normal(E, h, d, std=h**-0.5 / math.sqrt(2 * cfg.n_layers))
        self.b2 = nn.Parameter(torch.zeros(E, d))

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        T = x.shape[1]
        q, k, v = x @ self.wq, x @ self.wk, x @ self.wv
        scores = (q @ k.transpose(1, 2)) / math.sqrt(x.shape[-1])
        mask = torch.ones(T, T, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
        return torch.softmax(scores, dim=-1) @ v @ self.wo

    def shared_expert(self, h: torch.Tensor) -> torch.Tensor:
        return F.gelu(h @ self.shared_w1 + self.shared_b1) @ self.shared_w2 + self.shared_b2

    def routed_experts(self, h: torch.Tensor, idx: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        # Token->expert assignments are packed into an (E, capacity, d) buffer
        # so every expert runs as one slice of a batched matmul. Slices never
        # mix experts, and only assigned rows are read back.
        n, k = idx.shape
        E = self.w1.shape[0]
        flat_idx = idx.reshape(-1)
        valid = (flat_idx >= 0).nonzero().squeeze(1)
        expert = flat_idx[valid]
        order = torch.sort(expert, stable=True).indices
        slot = valid[order]
        expert = expert[order]
        token = slot // k
        counts = torch.bincount(expert, minlength=E)
        if expert.numel() == 0:
            return torch.zeros_like(h)
        starts = torch.cumsum(counts, 0) - counts
        pos = torch.arange(expert.numel()) - starts[expert]
        buf = h.new_zeros(E, int(counts.max()), h.shape[1])
        buf = buf.index_put((expert, pos), h[token])
        y = F.gelu(torch.bmm(buf, self.w1) + self.b1[:, None]) @ self.w2 + self.b2[:, None]
        contrib = y[expert, pos] * w.reshape(-1)[slot, None]
        return torch.zeros_like(h).index_add(0, token, contrib)

    def forward(self, x: torch.Tensor, layer: int, tuning: TuningConfig | None):
        B, T, d = x.shape
        x = x + self.attention(self.ln1(x))
        h = self.ln2(x).reshape(B * T, d)
        logits = h @ self.router
        idx, w = route_batch(logits, self.k)
        idx, w = override_batch(idx, w, layer, tuning, self.k)
        moe = self.shared_expert(h) + self.routed_scale * self.routed_experts(h, idx, w)
        x = x + moe.reshape(B, T, d)
        probs = torch.softmax(logits, dim=-1).reshape(B, T, -1)
        return x, idx.reshape(B, T, -1), w.reshape(B, T, -1), probs


class MoETransformer(nn.Module):
    """The model parameters plus the forward computation."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        gen = torch.Generator().manual_seed(int(cfg.seed))
        d = cfg.d_model
        self.embed = nn.Parameter(torch.randn(cfg.vocab_size, d, generator=gen) * 0.5)
        self.pos = nn.Parameter(torch.randn(cfg.seq_len_max, d, generator=gen) * 0.5)
        self.layers = nn.ModuleList(MoELayer(cfg, gen) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.unembed = nn.Parameter(torch.randn(d, cfg.vocab_size, generator=gen) * d**-0.5)

    def check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.ndim != 2:
            raise InputError("tokens must have shape (batch, length)")
        if tokens.shape[1] == 0:
            raise InputError("empty token sequence")
        if tokens.shape[1] > self.config.seq_len_max:
            raise InputError(f"sequence length {tokens.shape[1]} exceeds seq_len_max={self.config.seq_len_max}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise InputError(f"token id outside [0, {self.config.vocab_size})")

    def forward(self, tokens: torch.Tensor, tuning: TuningConfig | None = None) -> ModelOutput:
        self.check_tokens(tokens)
        if tuning is not None:
            cfg = self.config
            tuning.validate(cfg.n_layers, cfg.n_routed_experts, cfg.top_k)
        T = tokens.shape[1]
        x = self.embed[tokens] + self.pos[:T]
        ids, ws, probs = [], [], []
        for l, layer in enumerate(self.layers):
            x, idx, w, p = layer(x, l, tuning)
            ids.append(idx)
            ws.append(w)
            probs.append(p)
        logits = self.ln_f(x) @ self.unembed
        return ModelOutput(logits, torch.stack(ids), torch.stack(ws), probs)


def init_model(config: ModelConfig) -> MoETransformer:
    """Deterministic initialisation from ``config.seed``."""
    return MoETransformer(config)


# -- traces -----------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Gate decisions of every processed token plus the final logits.

    ``expert_ids`` and ``gate_weights`` have shape ``(tokens, layers, k)``;
    slots removed by suppression hold id ``-1`` and weight 0.
    """

    tokens: np.ndarray
    expert_ids: np.ndarray
    gate_weights: np.ndarray
    is_prompt: np.ndarray
    logits: np.ndarray | None = None

    @property
    def n_tokens(self) -> int:
        return int(self.expert_ids.shape[0])

    @property
    def n_layers(self) -> int:
        return int(self.expert_ids.shape[1])

    def decision(self, t: int, layer: int) -> GateDecision:
        ids = self.expert_ids[t, layer]
        keep = ids >= 0
        return GateDecision(layer, tuple(int(e) for e in ids[keep]), tuple(float(x) for x in self.gate_weights[t, layer][keep]))

    def decisions(self, t: int) -> list[GateDecision]:
        return [self.decision(t, l) for l in range(self.n_layers)]

    @property
    def degenerate(self) -> np.ndarray:
        """``(tokens, layers)`` flags for decisions with every routed expert removed."""
        return np.all(self.expert_ids < 0, axis=-1)

    def completion_tokens(self) -> np.ndarray:
        return self.tokens[~self.is_prompt]

    @classmethod
    def concat(cls, traces: Sequence["ForwardTrace"]) -> "ForwardTrace":
        return cls(
            tokens=np.concatenate([t.tokens for t in traces]),
            expert_ids=np.concatenate([t.expert_ids for t in traces]),
            gate_weights=np.concatenate([t.gate_weights for t in traces]),
            is_prompt=np.concatenate([t.is_prompt for t in traces]),
            logits=None,
        )


def _as_batch(tokens) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    return t[None] if t.ndim == 1 else t


@torch.no_grad()
def forward(model: MoETransformer, tokens, tuning: TuningConfig | None = None) -> ForwardTrace:
    """Run one token sequence and record every gate decision."""
    batch = _as_batch(tokens)
    if batch.shape[0] != 1:
        raise InputError("forward takes a single sequence; use generate_batch for batches")
    out = model(batch, tuning)
    return ForwardTrace(
        tokens=batch[0].numpy().copy(),
        expert_ids=out.expert_ids[:, 0].permute(1, 0, 2).numpy().copy(),
        gate_weights=out.gate_weights[:, 0].permute(1, 0, 2).double().numpy().copy(),
        is_prompt=np.ones(batch.shape[1], dtype=bool),
        logits=out.logits[0].double().numpy().copy(),
    )


@torch.no_grad()
def generate_batch(
    model: MoETransformer, prompts, max_new: int, tuning: TuningConfig | None = None
) -> tuple[np.ndarray, list[ForwardTrace]]:
    """Greedy decoding for equal-length prompts.

    Each token's gate decisions are recorded at the step in which it is first
    processed, as an incrementally decoding engine would see them. The last
    generated token is processed by one extra forward pass so the trace
    covers the whole sequence.
    """
    if max_new < 1:
        raise ConfigurationError("max_new must be >= 1")
    seqs = _as_batch(prompts)
    B, T0 = seqs.shape
    if T0 + max_new > model.config.seq_len_max:
        raise InputError(f"prompt length {T0} + max_new {max_new} exceeds seq_len_max")
    ids, ws = [], []
    for step in range(max_new + 1):
        out = model(seqs, tuning)
        start = 0 if step == 0 else seqs.shape[1] - 1
        ids.append(out.expert_ids[:, :, start:])
        ws.append(out.gate_weights[:, :, start:])
        if step == max_new:
            break
        nxt = out.logits[:, -1].argmax(dim=-1)
        seqs = torch.cat([seqs, nxt[:, None]], dim=1)
    expert_ids = torch.cat(ids, dim=2).permute(1, 2, 0, 3).numpy()
    weights = torch.cat(ws, dim=2).permute(1, 2, 0, 3).double().numpy()
    is_prompt = np.arange(seqs.shape[1]) < T0
    logits = out.logits.double().numpy()
    tokens = seqs.numpy()
    traces = [
        ForwardTrace(tokens[b].copy(), expert_ids[b].copy(), weights[b].copy(), is_prompt.copy(), logits[b].copy())
        for b in range(B)
    ]
    return tokens, traces


def generate(
    model: MoETransformer, prompt, max_new: int, tuning: TuningConfig | None = None
) -> tuple[np.ndarray, ForwardTrace]:
    tokens, traces = generate_batch(model, _as_batch(prompt), max_new, tuning)
    return tokens[0], traces[0]


def generate_many(
    model: MoETransformer, prompts: Sequence[Sequence[int]], max_new: int, tuning: TuningConfig | None = None
) -> tuple[list[np.ndarray], list[ForwardTrace]]:
    """Greedy decoding for prompts of mixed length, grouped by length internally."""
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    tokens: list = [None] * len(prompts)
    traces: list = [None] * len(prompts)
    for length in sorted(groups):
        members = groups[length]
        toks, trs = generate_batch(model, [list(prompts[i]) for i in members], max_new, tuning)
        for j, i in enumerate(members):
            tokens[i] = toks[j]
            traces[i] = trs[j]
    return tokens, traces


# -- checkpoints ------------------------------------------------------------


def save_model(path, model: MoETransformer) -> Path:
    """Write config and flat parameter arrays to a single ``.npz`` file."""
    import io

    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": asdict(model.config)}
    arrays = {f"param/{name}": p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    return atomic_write_bytes(path, buf.getvalue())


def load_model(path) -> MoETransformer:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
        model = MoETransformer(ModelConfig(**meta["config"]))
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    return model


def assert_finite(model: MoETransformer) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericError(f"non-finite values in parameter {name}")

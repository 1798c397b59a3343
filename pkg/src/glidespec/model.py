"""Frozen target decoder and the cache-reading draft decoder.

Both models are small LLaMA-style stacks (pre-RMSNorm, rotary positions,
SwiGLU feed-forward) kept in float64. Positions are absolute and shared:
a draft query at token position p is rotated exactly like a target key at
position p, so cross-attention scores keep their relative geometry.

Cache convention used throughout the package: once tokens ``x_1..x_c`` are
committed and ``x_c`` is the newest (bonus) token, the target cache holds
rows for ``x_1..x_{c-1}``. The draft, proposing from position ``t = c``,
cross-attends to exactly those rows.
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .errors import CapacityError, CheckpointFormatError, ContractError
from .kernels import DTYPE, masked_softmax, rmsnorm


@dataclass(frozen=True)
class TargetConfig:
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 16
    vocab_size: int = 64
    max_seq: int = 256
    ffn_dim: int = 128
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "vocab_size", "max_seq", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.head_dim % 2:
            raise ContractError("head_dim must be even for rotary embeddings")

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim


@dataclass(frozen=True)
class GlideConfig:
    """Draft architecture. ``cross_attention=False`` gives the vanilla drafter."""

    target: TargetConfig = field(default_factory=TargetConfig)
    n_layers: int = 1
    draft_dim: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    block_length: int = 5
    cross_attention: bool = True

    def __post_init__(self):
        if self.n_layers < 1 or self.n_layers > self.target.n_layers:
            raise ContractError(
                f"draft layers must be in [1, {self.target.n_layers}], got {self.n_layers}"
            )
        if self.draft_dim % self.n_heads or (self.draft_dim // self.n_heads) % 2:
            raise ContractError("draft_dim / n_heads must be an even integer")
        if self.block_length < 1:
            raise ContractError("block_length must be >= 1")

    @property
    def vocab_size(self) -> int:
        return self.target.vocab_size

    @property
    def self_head_dim(self) -> int:
        return self.draft_dim // self.n_heads

    def source_layer(self, m: int) -> int:
        """Target layer (1-based) whose cache draft layer ``m`` (1-based) reads."""
        if not 1 <= m <= self.n_layers:
            raise ContractError(f"draft layer {m} out of range")
        return self.target.n_layers - self.n_layers + m

    def vanilla(self) -> "GlideConfig":
        return replace(self, cross_attention=False)


class KVCache:
    """Per-layer key/value rows, each stored as ``(heads, rows, head_dim)``."""

    def __init__(self, n_layers: int, n_heads: int, head_dim: int):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        empty = torch.zeros(n_heads, 0, head_dim, dtype=DTYPE)
        self.keys = [empty.clone() for _ in range(n_layers)]
        self.values = [empty.clone() for _ in range(n_layers)]

    @classmethod
    def for_target(cls, cfg: TargetConfig) -> "KVCache":
        return cls(cfg.n_layers, cfg.n_heads, cfg.head_dim)

    def __len__(self) -> int:
        return self.keys[0].shape[1]

    @property
    def cached_len(self) -> int:
        return len(self)

    def layer(self, l: int) -> tuple[Tensor, Tensor]:
        """1-based layer access."""
        return self.keys[l - 1], self.values[l - 1]

    def append(self, l: int, k: Tensor, v: Tensor) -> None:
        self.keys[l - 1] = torch.cat([self.keys[l - 1], k], dim=1)
        self.values[l - 1] = torch.cat([self.values[l - 1], v], dim=1)

    def truncate(self, keep: int) -> "KVCache":
        if keep < 0 or keep > len(self):
            raise ContractError(f"cannot keep {keep} rows of a {len(self)}-row cache")
        if keep == len(self):
            return self
        self.keys = [k[:, :keep] for k in self.keys]
        self.values = [v[:, :keep] for v in self.values]
        return self

    def select(self, rows: Sequence[int]) -> "KVCache":
        """Keep only the given 0-based rows, in the given order."""
        idx = torch.as_tensor(list(rows), dtype=torch.long)
        if len(idx) and (idx.min() < 0 or idx.max() >= len(self)):
            raise ContractError("row index out of range")
        self.keys = [k[:, idx] for k in self.keys]
        self.values = [v[:, idx] for v in self.values]
        return self

    def copy(self) -> "KVCache":
        out = KVCache(self.n_layers, self.n_heads, self.head_dim)
        out.keys = [k.clone() for k in self.keys]
        out.values = [v.clone() for v in self.values]
        return out


def truncate_cache(cache: KVCache, keep: int) -> KVCache:
    return cache.truncate(keep)


def rotary(x: Tensor, positions: Tensor, base: float) -> Tensor:
    """Rotate ``x[..., n, d]`` by absolute 0-based ``positions`` (length n)."""
    d = x.shape[-1]
    inv = base ** (-torch.arange(0, d, 2, dtype=DTYPE) / d)
    ang = positions.to(DTYPE)[:, None] * inv[None, :]
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def attend(q: Tensor, k: Tensor, v: Tensor, allow: Tensor) -> Tensor:
    """Scaled dot-product attention; ``allow`` broadcasts over (.., nq, nk)."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return masked_softmax(scores, allow.expand_as(scores)) @ v


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, h, d // h).transpose(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    return x.transpose(-2, -3).reshape(*lead, n, h * d)


class RMSNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return rmsnorm(x, self.gain)


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(dim, hidden, bias=False, dtype=DTYPE)
        self.up = nn.Linear(dim, hidden, bias=False, dtype=DTYPE)
        self.down = nn.Linear(hidden, dim, bias=False, dtype=DTYPE)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(nn.functional.silu(self.gate(x)) * self.up(x))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, rope_base: float):
        super().__init__()
        self.n_heads = n_heads
        self.rope_base = rope_base
        self.wq = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.wk = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.wv = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.wo = nn.Linear(dim, dim, bias=False, dtype=DTYPE)

    def forward(self, x, positions, allow, past=None):
        """Returns (output, k_new, v_new); new keys are already rotated."""
        q = rotary(_split_heads(self.wq(x), self.n_heads), positions, self.rope_base)
        k = rotary(_split_heads(self.wk(x), self.n_heads), positions, self.rope_base)
        v = _split_heads(self.wv(x), self.n_heads)
        if past is not None:
            pk, pv = past
            k_all = torch.cat([pk.expand(*k.shape[:-2], -1, -1), k], dim=-2)
            v_all = torch.cat([pv.expand(*v.shape[:-2], -1, -1), v], dim=-2)
        else:
            k_all, v_all = k, v
        out = self.wo(_merge_heads(attend(q, k_all, v_all, allow)))
        return out, k, v


class CrossAttention(nn.Module):
    """Queries from draft states, keys/values from one target layer's cache.

    ``wq[j]`` is the ``d_D x d_k`` projection for target head ``j``;
    ``wo`` maps the concatenated heads (``h*d_k``) back to ``d_D``.
    """

    def __init__(self, draft_dim: int, n_heads: int, head_dim: int, rope_base: float):
        super().__init__()
        self.rope_base = rope_base
        self.wq = nn.Parameter(torch.zeros(n_heads, draft_dim, head_dim, dtype=DTYPE))
        self.wo = nn.Parameter(torch.zeros(n_heads * head_dim, draft_dim, dtype=DTYPE))

    def forward(self, hidden, positions, k, v, allow):
        q = hidden.unsqueeze(-3) @ self.wq  # (..., h, n, d_k)
        q = rotary(q, positions, self.rope_base)
        return _merge_heads(attend(q, k, v, allow)) @ self.wo


class TargetBlock(nn.Module):
    def __init__(self, cfg: TargetConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.model_dim)
        self.attn = SelfAttention(cfg.model_dim, cfg.n_heads, cfg.rope_base)
        self.ffn_norm = RMSNorm(cfg.model_dim)
        self.ffn = SwiGLU(cfg.model_dim, cfg.ffn_dim)

    def forward(self, x, positions, allow, past=None):
        a, k, v = self.attn(self.attn_norm(x), positions, allow, past)
        x = x + a
        return x + self.ffn(self.ffn_norm(x)), k, v


def _init_weights(module: nn.Module, seed: int, std: float = 0.02) -> None:
    # One generator per parameter name so models that share parameter names
    # (a draft with and without cross-attention) start from identical values.
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("gain"):
                p.fill_(1.0)
                continue
            gen = torch.Generator().manual_seed((int(seed) * 1_000_003 + zlib.crc32(name.encode())) % 2**63)
            p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * std)


class TargetModel(nn.Module):
    """Standard decoder-only transformer with a key/value cache."""

    def __init__(self, cfg: TargetConfig, seed: int = 0, init_std: float = 0.02):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.model_dim, dtype=DTYPE)
        self.blocks = nn.ModuleList(TargetBlock(cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.model_dim)
        self.lm_head = nn.Linear(cfg.model_dim, cfg.vocab_size, bias=False, dtype=DTYPE)
        _init_weights(self, seed, init_std)

    def forward(self, tokens: Tensor, positions=None, allow=None, cache: KVCache | None = None):
        """Logits for ``tokens`` (``(n,)`` or ``(B, n)``) plus per-layer new (K, V).

        ``allow`` covers (new rows) x (cached rows + new rows); it defaults to
        full visibility of the cache and causal visibility among new rows.
        """
        n = tokens.shape[-1]
        past_len = len(cache) if cache is not None else 0
        if positions is None:
            positions = torch.arange(past_len, past_len + n)
        positions = torch.as_tensor(positions, dtype=torch.long)
        if allow is None:
            allow = torch.ones(n, past_len + n, dtype=torch.bool)
            allow[:, past_len:] = torch.tril(torch.ones(n, n, dtype=torch.bool))
        x = self.embed(tokens)
        new_kv = []
        for l, block in enumerate(self.blocks, start=1):
            past = cache.layer(l) if cache is not None else None
            x, k, v = block(x, positions, allow, past)
            new_kv.append((k, v))
        return self.lm_head(self.norm(x)), new_kv

    def checksum(self) -> str:
        return state_checksum(self)


def target_forward(
    model: TargetModel,
    tokens: Sequence[int],
    cache: KVCache,
    positions: Sequence[int] | None = None,
    chunk_mask: np.ndarray | None = None,
) -> Tensor:
    """Run the target over ``tokens`` after the cached prefix, in one pass.

    Returns next-token distributions ``(n, V)`` and appends the new K/V rows
    to ``cache``; callers truncate whatever verification rejects.
    ``positions`` are 0-based absolute positions (default: right after the
    cache). ``chunk_mask`` is an ``(n, n)`` boolean grid among the new rows
    (default causal); every new row sees all cached rows.
    """
    n = len(tokens)
    if n == 0:
        raise ContractError("empty context")
    past = len(cache)
    pos = torch.arange(past, past + n) if positions is None else torch.as_tensor(positions)
    if int(pos.max()) >= model.cfg.max_seq:
        raise CapacityError(f"position {int(pos.max())} exceeds max_seq {model.cfg.max_seq}")
    allow = None
    if chunk_mask is not None:
        allow = torch.ones(n, past + n, dtype=torch.bool)
        allow[:, past:] = torch.as_tensor(np.asarray(chunk_mask, dtype=bool))
    with torch.no_grad():
        logits, new_kv = model(torch.as_tensor(list(tokens)), pos, allow, cache)
    for l, (k, v) in enumerate(new_kv, start=1):
        cache.append(l, k, v)
    return torch.softmax(logits, dim=-1)


def prefill(model: TargetModel, tokens: Sequence[int]) -> tuple[Tensor, KVCache]:
    cache = KVCache.for_target(model.cfg)
    probs = target_forward(model, tokens, cache)
    return probs, cache


class GlideBlock(nn.Module):
    def __init__(self, cfg: GlideConfig):
        super().__init__()
        d = cfg.draft_dim
        base = cfg.target.rope_base
        self.attn_norm = RMSNorm(d)
        self.attn = SelfAttention(d, cfg.n_heads, base)
        if cfg.cross_attention:
            self.cross_norm = RMSNorm(d)
            self.cross = CrossAttention(d, cfg.target.n_heads, cfg.target.head_dim, base)
        else:
            self.cross = None
        self.ffn_norm = RMSNorm(d)
        self.ffn = SwiGLU(d, cfg.ffn_dim)

    def forward(self, x, positions, self_allow, cross_kv, cross_allow, past=None):
        a, k, v = self.attn(self.attn_norm(x), positions, self_allow, past)
        x = x + a
        if self.cross is not None and cross_kv is not None:
            ck, cv = cross_kv
            x = x + self.cross(self.cross_norm(x), positions, ck, cv, cross_allow)
        return x + self.ffn(self.ffn_norm(x)), k, v


def state_checksum(module: nn.Module) -> str:
    """sha256 over parameter names and raw float64 bytes."""
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class GlideDraft(nn.Module):
    """Draft decoder whose layers cross-attend into the target's cached K/V.

    Draft layer ``m`` reads target layer ``N_T - N_D + m``. The cross
    sub-layer sits between self-attention and the feed-forward network.
    """

    def __init__(self, cfg: GlideConfig, seed: int = 0, init_std: float = 0.02):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.draft_dim, dtype=DTYPE)
        self.blocks = nn.ModuleList(GlideBlock(cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.draft_dim)
        self.lm_head = nn.Linear(cfg.draft_dim, cfg.vocab_size, bias=False, dtype=DTYPE)
        _init_weights(self, seed, init_std)

    def checksum(self) -> str:
        return state_checksum(self)

    def forward(
        self,
        tokens: Tensor,
        positions: Tensor,
        target_kv: Sequence[tuple[Tensor, Tensor]] | None,
        cross_allow: Tensor | None,
        self_allow: Tensor | None = None,
        self_cache: KVCache | None = None,
        span_log: list | None = None,
    ):
        """Logits and per-layer new self-attention K/V.

        ``target_kv`` is indexed by 0-based target layer; ``cross_allow`` is
        ``(n, target_rows)``. Rows with no allowed key get a zero
        cross-attention contribution.
        """
        n = tokens.shape[-1]
        past_len = len(self_cache) if self_cache is not None else 0
        if self_allow is None:
            self_allow = torch.ones(n, past_len + n, dtype=torch.bool)
            self_allow[:, past_len:] = torch.tril(torch.ones(n, n, dtype=torch.bool))
        x = self.embed(tokens)
        new_kv = []
        for m, block in enumerate(self.blocks, start=1):
            cross_kv = None
            if target_kv is not None and block.cross is not None:
                l = self.cfg.source_layer(m)
                cross_kv = target_kv[l - 1]
                if span_log is not None:
                    span_log.append((m, l, cross_allow.clone()))
            past = self_cache.layer(m) if self_cache is not None else None
            x, k, v = block(x, positions, self_allow, cross_kv, cross_allow, past)
            new_kv.append((k, v))
        return self.lm_head(self.norm(x)), new_kv

    def new_cache(self) -> KVCache:
        return KVCache(self.cfg.n_layers, self.cfg.n_heads, self.cfg.self_head_dim)


def _cache_kv(cache: KVCache | None):
    if cache is None:
        return None
    return [cache.layer(l) for l in range(1, cache.n_layers + 1)]


def glide_forward(
    draft: GlideDraft,
    draft_ctx: Sequence[int],
    target_cache: KVCache | None,
    query_start: int,
    span_log: list | None = None,
) -> Tensor:
    """Stateless draft pass over ``draft_ctx`` (tokens at positions 1..n).

    Rows at 1-based positions ``>= query_start`` cross-attend to every cached
    target row; earlier rows skip the cross sub-layer. The target cache must
    be the delayed one: ``len(target_cache) == query_start - 1``.
    """
    n = len(draft_ctx)
    tc = len(target_cache) if target_cache is not None else 0
    if target_cache is not None and tc != query_start - 1:
        raise ContractError(f"delayed cache must hold {query_start - 1} rows, has {tc}")
    positions = torch.arange(n)
    cross_allow = torch.zeros(n, tc, dtype=torch.bool)
    cross_allow[query_start - 1 :, :] = True
    with torch.no_grad():
        logits, _ = draft(
            torch.as_tensor(list(draft_ctx)), positions, _cache_kv(target_cache), cross_allow,
            span_log=span_log,
        )
    return torch.softmax(logits, dim=-1)


class DraftRunner:
    """Incremental draft decoding with a prefix-only self-attention cache.

    The runner's cache only ever holds rows for positions before the current
    query start; those rows never see cross-attention, so they stay valid
    across rounds. Rows computed during a round are scratch and dropped.
    """

    def __init__(self, draft: GlideDraft):
        self.draft = draft
        self.cache = draft.new_cache()

    def reset(self) -> None:
        self.cache = self.draft.new_cache()

    def step(self, tokens, start_pos, target_cache, cross_on, cache, span_log=None) -> Tensor:
        """Feed ``tokens`` at 1-based ``start_pos`` onward, appending to ``cache``."""
        n = len(tokens)
        positions = torch.arange(start_pos - 1, start_pos - 1 + n)
        tc = len(target_cache) if target_cache is not None else 0
        cross_allow = torch.full((n, tc), bool(cross_on), dtype=torch.bool)
        with torch.no_grad():
            logits, new_kv = self.draft(
                torch.as_tensor(list(tokens)), positions, _cache_kv(target_cache),
                cross_allow, self_cache=cache, span_log=span_log,
            )
        for m, (k, v) in enumerate(new_kv, start=1):
            cache.append(m, k, v)
        return torch.softmax(logits, dim=-1)

    def sync(self, committed: Sequence[int], target_cache: KVCache | None) -> None:
        """Make the prefix cache cover exactly positions ``1..len(committed)-1``."""
        t = len(committed)
        if len(self.cache) > t - 1:
            self.cache.truncate(t - 1)
        have = len(self.cache)
        if have < t - 1:
            self.step(committed[have : t - 1], have + 1, target_cache, False, self.cache)

    def begin_round(self, committed: Sequence[int], target_cache: KVCache | None, span_log=None):
        """Start proposing after ``committed``; returns the distribution for position t+1."""
        if target_cache is not None and len(target_cache) != len(committed) - 1:
            raise ContractError(
                f"delayed cache must hold {len(committed) - 1} rows, has {len(target_cache)}"
            )
        self.sync(committed, target_cache)
        self._scratch = self.cache.copy()
        self._target_cache = target_cache
        self._next_pos = len(committed)
        self._span_log = span_log
        return self.advance(committed[-1])

    def advance(self, token: int) -> np.ndarray:
        probs = self.step([token], self._next_pos, self._target_cache, True, self._scratch,
                          self._span_log)
        self._next_pos += 1
        return probs[-1].numpy()


# -- checkpoints -------------------------------------------------------------

MAGIC = b"GLIDECKPT"[:8]
VERSION = 1
_KIND = {"target": 0.0, "glide": 1.0, "vanilla": 2.0}


def _blocks_of(model: nn.Module) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f8")
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            arr = arr.reshape(-1, arr.shape[-1])
        out.append((name, arr))
    return out


def _meta_blocks(model) -> list[tuple[str, np.ndarray]]:
    if isinstance(model, TargetModel):
        c = model.cfg
        meta = {"kind": _KIND["target"], "max_seq": c.max_seq, "ffn_dim": c.ffn_dim,
                "rope_base": c.rope_base}
    else:
        c = model.cfg
        meta = {
            "kind": _KIND["glide" if c.cross_attention else "vanilla"],
            "n_heads": c.n_heads, "ffn_dim": c.ffn_dim,
            "target.n_layers": c.target.n_layers, "target.max_seq": c.target.max_seq,
            "target.ffn_dim": c.target.ffn_dim, "rope_base": c.target.rope_base,
        }
    return [(f"meta.{k}", np.array([[float(v)]], dtype="<f8")) for k, v in meta.items()]


def _header_fields(model) -> tuple[int, ...]:
    if isinstance(model, TargetModel):
        c = model.cfg
        return (c.n_layers, c.n_heads, c.head_dim, c.model_dim, c.vocab_size, 0)
    c = model.cfg
    t = c.target
    return (c.n_layers, t.n_heads, t.head_dim, c.draft_dim, t.vocab_size, c.block_length)


def checkpoint_bytes(model: TargetModel | GlideDraft) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<6I", *_header_fields(model))]
    for name, arr in _meta_blocks(model) + _blocks_of(model):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: TargetModel | GlideDraft, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


def read_header(data: bytes) -> dict:
    if len(data) < 8 or data[:8] != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    if len(data) < 36:
        raise CheckpointFormatError("truncated header")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    n_layers, h, d_k, d_model, vocab, block = struct.unpack_from("<6I", data, 12)
    return {"version": version, "n_layers": n_layers, "n_heads": h, "head_dim": d_k,
            "model_dim": d_model, "vocab_size": vocab, "block_length": block}


def _read_blocks(data: bytes, offset: int) -> dict[str, np.ndarray]:
    blocks = {}
    while offset < len(data):
        try:
            (nlen,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset : offset + nlen].decode("utf-8")
            offset += nlen
            rows, cols = struct.unpack_from("<II", data, offset)
            offset += 8
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt parameter block: {exc}") from None
        size = rows * cols * 8
        if offset + size > len(data):
            raise CheckpointFormatError(f"block {name!r} runs past end of file")
        blocks[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset).reshape(
            rows, cols
        )
        offset += size
    return blocks


def load_checkpoint(path) -> TargetModel | GlideDraft:
    data = Path(path).read_bytes()
    hdr = read_header(data)
    blocks = _read_blocks(data, 36)
    meta = {k[5:]: float(v[0, 0]) for k, v in blocks.items() if k.startswith("meta.")}
    if "kind" not in meta:
        raise CheckpointFormatError("missing meta.kind block")
    kind = int(meta["kind"])
    if kind == 0:
        cfg = TargetConfig(
            n_layers=hdr["n_layers"], n_heads=hdr["n_heads"], head_dim=hdr["head_dim"],
            vocab_size=hdr["vocab_size"], max_seq=int(meta["max_seq"]),
            ffn_dim=int(meta["ffn_dim"]), rope_base=meta["rope_base"],
        )
        if cfg.model_dim != hdr["model_dim"]:
            raise CheckpointFormatError("model_dim != n_heads * head_dim")
        model = TargetModel(cfg)
    elif kind in (1, 2):
        tcfg = TargetConfig(
            n_layers=int(meta["target.n_layers"]), n_heads=hdr["n_heads"],
            head_dim=hdr["head_dim"], vocab_size=hdr["vocab_size"],
            max_seq=int(meta["target.max_seq"]), ffn_dim=int(meta["target.ffn_dim"]),
            rope_base=meta["rope_base"],
        )
        cfg = GlideConfig(
            target=tcfg, n_layers=hdr["n_layers"], draft_dim=hdr["model_dim"],
            n_heads=int(meta["n_heads"]), ffn_dim=int(meta["ffn_dim"]),
            block_length=hdr["block_length"], cross_attention=(kind == 1),
        )
        model = GlideDraft(cfg)
    else:
        raise CheckpointFormatError(f"unknown model kind {kind}")
    state = model.state_dict()
    missing = [k for k in state if k not in blocks]
    if missing:
        raise CheckpointFormatError(f"missing parameter blocks: {missing[:3]}")
    new_state = {}
    for name, ref in state.items():
        arr = blocks[name]
        if arr.size != ref.numel() or arr.shape[-1] != (ref.shape[-1] if ref.dim() else 1):
            raise CheckpointFormatError(
                f"dimension mismatch for {name}: file {arr.shape}, model {tuple(ref.shape)}"
            )
        new_state[name] = torch.from_numpy(arr.copy()).reshape(ref.shape)
    model.load_state_dict(new_state)
    return model

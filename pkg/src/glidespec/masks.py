"""Attention masks: causal, block-wise (draft training), and expanded-proposal verification.

Token and block indices are 1-based in the predicates below. The boolean
grids are stored 0-based; row ``r`` of a grid is token ``r + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class AttentionMask:
    """Boolean attend/deny grid. ``allow[r, c]`` true means attend."""

    allow: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        arr = np.asarray(self.allow, dtype=bool)
        if arr.ndim != 2:
            raise ContractError("mask must be 2-D")
        arr.setflags(write=False)
        object.__setattr__(self, "allow", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.allow.shape

    @property
    def bypass_rows(self) -> list[int]:
        """0-based rows with no allowed column."""
        return [int(r) for r in np.flatnonzero(~self.allow.any(axis=1))]

    def to_text(self) -> str:
        return "\n".join("".join("#" if v else "." for v in row) for row in self.allow)

    @classmethod
    def from_text(cls, text: str, kind: str = "custom") -> "AttentionMask":
        rows = [line.strip() for line in text.strip().splitlines()]
        return cls(np.array([[c == "#" for c in row] for row in rows], dtype=bool), kind)

    def __eq__(self, other):
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.allow, other.allow))

    def __hash__(self):
        return hash((self.shape, self.allow.tobytes()))


@dataclass(frozen=True)
class BlockAssignment:
    block_length: int = 5

    def __post_init__(self):
        if self.block_length < 1:
            raise ContractError("block_length must be >= 1")

    def block(self, j: int) -> int:
        """1-based block index of 1-based token ``j``."""
        if j < 1:
            raise ContractError(f"token index must be >= 1, got {j}")
        return -(-j // self.block_length)


@dataclass(frozen=True)
class PositionMap:
    """Maps each 1-based linearized index to its 1-based proposal position."""

    gamma: int
    positions: tuple[int, ...] = field(default=())

    def __post_init__(self):
        pos = tuple(int(p) for p in self.positions)
        object.__setattr__(self, "positions", pos)
        if self.gamma < 1:
            raise ContractError("gamma must be >= 1")
        if len(pos) < self.gamma:
            raise ContractError("position map shorter than gamma")
        if pos[: self.gamma] != tuple(range(1, self.gamma + 1)):
            raise ContractError("first gamma entries must map to themselves")
        if any(p < 1 or p > self.gamma for p in pos):
            raise ContractError("every position must lie in [1, gamma]")

    @classmethod
    def from_set_sizes(cls, set_sizes: Sequence[int]) -> "PositionMap":
        gamma = len(set_sizes)
        tail = [j for j, k in enumerate(set_sizes, start=1) for _ in range(int(k))]
        return cls(gamma, tuple(range(1, gamma + 1)) + tuple(tail))

    @property
    def beta(self) -> int:
        return len(self.positions)

    def pos(self, i: int) -> int:
        return self.positions[i - 1]


def causal_mask(n: int) -> AttentionMask:
    if n < 1:
        raise ContractError("n must be >= 1")
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)), "causal")


def block_mask(
    query_positions: Sequence[int], kv_len: int, blocks: BlockAssignment | int = 5
) -> AttentionMask:
    """Cross-attention mask that lets token j see token k iff block(j) > block(k).

    ``query_positions`` are absolute 1-based token indices; key columns
    cover tokens ``1..kv_len``.
    """
    if isinstance(blocks, int):
        blocks = BlockAssignment(blocks)
    if kv_len < 0:
        raise ContractError("kv_len must be >= 0")
    q_blocks = np.array([blocks.block(j) for j in query_positions], dtype=np.int64)
    k_blocks = np.array([blocks.block(k) for k in range(1, kv_len + 1)], dtype=np.int64)
    return AttentionMask(q_blocks[:, None] > k_blocks[None, :], "block")


def cape_mask(gamma: int, posmap: PositionMap) -> AttentionMask:
    """Verification mask over a linearized expanded proposal.

    Row i may attend column j iff (j <= gamma and pos(i) > j) or i == j.
    """
    if posmap.gamma != gamma:
        raise ContractError(f"position map gamma {posmap.gamma} != {gamma}")
    beta = posmap.beta
    pos = np.asarray(posmap.positions)
    cols = np.arange(1, beta + 1)
    allow = ((cols[None, :] <= gamma) & (pos[:, None] > cols[None, :])) | np.eye(beta, dtype=bool)
    return AttentionMask(allow, "cape")


@dataclass
class MaskReport:
    ok: bool
    first_mismatch: tuple[int, int] | None = None
    expected: bool | None = None

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "pass"
        i, j = self.first_mismatch
        return f"fail at (i={i}, j={j}): expected {'allow' if self.expected else 'deny'}"


def _predicate(kind: str, params: dict) -> tuple[Callable[[int, int], bool], tuple[int, int]]:
    if kind == "causal":
        n = params["n"]
        return (lambda i, j: j <= i), (n, n)
    if kind == "block":
        blocks = params.get("blocks", BlockAssignment(params.get("block_length", 5)))
        qpos = list(params["query_positions"])
        kv_len = params["kv_len"]
        return (lambda i, j: blocks.block(qpos[i - 1]) > blocks.block(j)), (len(qpos), kv_len)
    if kind == "cape":
        posmap: PositionMap = params["posmap"]
        gamma = params.get("gamma", posmap.gamma)
        return (
            lambda i, j: (j <= gamma and posmap.pos(i) > j) or i == j
        ), (posmap.beta, posmap.beta)
    raise ContractError(f"unknown mask kind {kind!r}")


def validate_mask_semantics(mask: AttentionMask, kind: str, **params) -> MaskReport:
    """Re-derive every entry from the defining predicate, element by element.

    Indices in the report are 1-based, matching the predicates.
    """
    pred, shape = _predicate(kind, params)
    if mask.shape != shape:
        return MaskReport(False, (0, 0), None)
    for i in range(1, shape[0] + 1):
        for j in range(1, shape[1] + 1):
            want = pred(i, j)
            if bool(mask.allow[i - 1, j - 1]) != want:
                return MaskReport(False, (i, j), want)
    return MaskReport(True)


def block_mask_allowed_count(query_positions: Sequence[int], kv_len: int, block_length: int) -> int:
    """Closed form: a query in block b sees min((b-1)*L, kv_len) keys."""
    return sum(min((math.ceil(j / block_length) - 1) * block_length, kv_len) for j in query_positions)

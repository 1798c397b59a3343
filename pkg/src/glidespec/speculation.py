"""Draft-side proposal generation and confidence-aware proposal expansion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import ContractError
from .kernels import sample_token
from .masks import AttentionMask, PositionMap, cape_mask

# (upper bound of the confidence range, expansion size); ranges are (lo, hi].
CONFIDENCE_BUCKETS: tuple[tuple[float, int], ...] = ((0.3, 7), (0.6, 5), (0.8, 3), (1.0, 1))


@dataclass(frozen=True)
class SpeculationConfig:
    gamma: int = 5
    max_verify_tokens: int = 32
    # None: confidence-aware sizes; an int: the same size at every position.
    fixed_expansion: int | None = None
    buckets: tuple[tuple[float, int], ...] = CONFIDENCE_BUCKETS

    def __post_init__(self):
        if self.gamma < 1:
            raise ContractError("gamma must be >= 1")
        if self.max_verify_tokens < self.gamma:
            raise ContractError("max_verify_tokens must be >= gamma")
        if self.fixed_expansion is not None and self.fixed_expansion < 0:
            raise ContractError("fixed_expansion must be >= 0")


class Drafter(Protocol):
    def begin_round(self, committed: Sequence[int], target_cache) -> np.ndarray: ...

    def advance(self, token: int) -> np.ndarray: ...


@dataclass
class Proposal:
    tokens: list[int]
    dists: np.ndarray  # (gamma, V) draft distributions at proposal time

    @property
    def gamma(self) -> int:
        return len(self.tokens)

    @property
    def confidences(self) -> list[float]:
        return [float(d.max()) for d in self.dists]


@dataclass
class ExpandedProposal:
    tokens: list[int]
    confidences: list[float]
    expansion_sets: list[list[int]]
    # draft probability of each expansion-set member, aligned with expansion_sets
    expansion_probs: list[list[float]] = field(default_factory=list)

    @property
    def gamma(self) -> int:
        return len(self.tokens)

    @property
    def set_sizes(self) -> list[int]:
        return [len(x) for x in self.expansion_sets]


@dataclass
class LinearizedProposal:
    tokens: list[int]
    posmap: PositionMap
    mask: AttentionMask
    expanded: ExpandedProposal

    @property
    def gamma(self) -> int:
        return self.posmap.gamma

    @property
    def beta(self) -> int:
        return self.posmap.beta

    def expansion_index(self, position: int, token: int) -> int | None:
        """1-based linearized index of ``token`` in the set at ``position``."""
        for i in range(self.gamma + 1, self.beta + 1):
            if self.posmap.pos(i) == position and self.tokens[i - 1] == token:
                return i
        return None


def _argmax(p: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties.
    return int(np.argmax(p))


def propose(
    drafter: Drafter,
    committed: Sequence[int],
    target_cache,
    cfg: SpeculationConfig,
    rng: np.random.Generator | None = None,
    gamma: int | None = None,
) -> Proposal:
    """Autoregressively draft ``gamma`` tokens after ``committed``.

    Greedy when ``rng`` is None, otherwise each token is sampled from the
    draft distribution.
    """
    gamma = cfg.gamma if gamma is None else gamma
    tokens, dists = [], []
    dist = np.asarray(drafter.begin_round(committed, target_cache), dtype=np.float64)
    for i in range(gamma):
        tok = _argmax(dist) if rng is None else sample_token(dist, rng)
        tokens.append(tok)
        dists.append(dist)
        if i + 1 < gamma:
            dist = np.asarray(drafter.advance(tok), dtype=np.float64)
    return Proposal(tokens, np.stack(dists))


def expansion_size(p: float, buckets=CONFIDENCE_BUCKETS) -> int:
    """Number of runner-up tokens to verify for a proposal with confidence ``p``."""
    if not 0.0 < p <= 1.0:
        raise ContractError(f"confidence must lie in (0, 1], got {p!r}")
    for hi, size in buckets:
        if p <= hi:
            return size
    return buckets[-1][1]


def rank_tokens(dist: np.ndarray) -> np.ndarray:
    """Token ids by descending probability; equal probabilities by ascending id."""
    dist = np.asarray(dist)
    return np.lexsort((np.arange(dist.size), -dist))


def expand(proposal: Proposal, cfg: SpeculationConfig) -> ExpandedProposal:
    """Attach to each proposed token its next-best alternatives.

    Only post-processing: the proposal tokens and draft distributions are
    left untouched.
    """
    sets, probs, confs = [], [], []
    for tok, dist in zip(proposal.tokens, proposal.dists):
        p_i = float(dist.max())
        if cfg.fixed_expansion is None:
            k = expansion_size(p_i, cfg.buckets)
        else:
            k = cfg.fixed_expansion
        k = min(k, dist.size - 1)
        ranked = [int(t) for t in rank_tokens(dist) if t != tok][:k]
        sets.append(ranked)
        probs.append([float(dist[t]) for t in ranked])
        confs.append(p_i)
    return ExpandedProposal(list(proposal.tokens), confs, sets, probs)


def linearize(ep: ExpandedProposal, cfg: SpeculationConfig) -> LinearizedProposal:
    """Flatten an expanded proposal and build its verification mask.

    Expansion tokens follow the proposal, ordered by position then by
    descending draft probability. When the total exceeds the verification
    budget, the lowest-probability expansion tokens are dropped first
    (later position, then higher id, on equal probability).
    """
    entries = []
    for j, (members, probs) in enumerate(zip(ep.expansion_sets, ep.expansion_probs), start=1):
        for tok, p in zip(members, probs):
            entries.append((j, p, tok))
    budget = cfg.max_verify_tokens - ep.gamma
    if len(entries) > budget:
        by_drop = sorted(entries, key=lambda e: (e[1], -e[0], -e[2]))
        dropped = set(map(tuple, by_drop[: len(entries) - budget]))
        entries = [e for e in entries if e not in dropped]
    entries.sort(key=lambda e: (e[0], -e[1], e[2]))

    kept_sets = [[] for _ in range(ep.gamma)]
    kept_probs = [[] for _ in range(ep.gamma)]
    for j, p, tok in entries:
        kept_sets[j - 1].append(tok)
        kept_probs[j - 1].append(p)
    kept = ExpandedProposal(list(ep.tokens), list(ep.confidences), kept_sets, kept_probs)

    tokens = list(ep.tokens) + [tok for _, _, tok in entries]
    positions = tuple(range(1, ep.gamma + 1)) + tuple(j for j, _, _ in entries)
    posmap = PositionMap(ep.gamma, positions)
    return LinearizedProposal(tokens, posmap, cape_mask(ep.gamma, posmap), kept)


@dataclass
class ProfileBucket:
    index: int  # 1-based, bucket k covers [(k-1)/10, k/10)
    lo: float
    hi: float
    count: int
    accepted: int

    @property
    def fraction(self) -> float:
        return self.accepted / self.count if self.count else float("nan")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)


def confidence_acceptance_profile(
    log: Iterable[tuple[float, bool]], n_buckets: int = 10
) -> list[ProfileBucket]:
    """Empirical acceptance per confidence decile; empty buckets are omitted.

    The last bucket is closed on the right so confidence 1.0 lands in it.
    """
    counts = np.zeros(n_buckets, dtype=int)
    hits = np.zeros(n_buckets, dtype=int)
    for p, ok in log:
        b = min(int(p * n_buckets), n_buckets - 1)
        counts[b] += 1
        hits[b] += bool(ok)
    return [
        ProfileBucket(b + 1, b / n_buckets, (b + 1) / n_buckets, int(counts[b]), int(hits[b]))
        for b in range(n_buckets)
        if counts[b]
    ]


def profile_from_trace(trace: Iterable[dict]) -> list[tuple[float, bool]]:
    """(confidence, accepted) pairs for every proposal token the target judged.

    Tokens after the first rejection were never judged and are skipped. A
    substituted expansion token does not count as acceptance of the
    original proposal token.
    """
    pairs = []
    for rec in trace:
        n = rec["accepted_len"] - (1 if rec.get("substitution") else 0)
        confs = rec["confidences"]
        for i, c in enumerate(confs, start=1):
            if i <= n:
                pairs.append((c, True))
            else:
                pairs.append((c, False))
                break
    return pairs


def trace_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)

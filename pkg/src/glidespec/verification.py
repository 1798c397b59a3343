"""Target-side verification and the speculate/verify decoding loop.

Distribution rows handed to the verifiers are aligned so that row 0 is the
target's prediction after the last committed token ``x_t`` and row ``i``
is its prediction after the ``i``-th verified token.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import CapacityError, ContractError
from .kernels import sample_token
from .model import DraftRunner, GlideDraft, TargetModel, prefill, target_forward
from .speculation import (
    Drafter,
    LinearizedProposal,
    SpeculationConfig,
    expand,
    linearize,
    propose,
)

GREEDY = "greedy"
SAMPLING = "sampling"


@dataclass
class VerificationResult:
    accepted_len: int
    accepted_tokens: list[int]
    bonus_token: int
    commit_len: int
    accepted_from_expansion: tuple[int, int] | None = None
    # rows of the verified chunk whose K/V survive; row 0 is x_t
    keep_rows: list[int] = field(default_factory=list)

    @property
    def committed(self) -> list[int]:
        return self.accepted_tokens + [self.bonus_token]


def _argmax(p) -> int:
    return int(np.argmax(np.asarray(p)))


def _np(p) -> np.ndarray:
    return p.numpy() if isinstance(p, torch.Tensor) else np.asarray(p, dtype=np.float64)


def verify_greedy(proposal: Sequence[int], target_probs, prev_len: int = 0) -> VerificationResult:
    """Accept the longest prefix that matches the target's argmax chain."""
    target_probs = _np(target_probs)
    gamma = len(proposal)
    if target_probs.shape[0] != gamma + 1:
        raise ContractError(f"need {gamma + 1} target rows, got {target_probs.shape[0]}")
    n = 0
    while n < gamma and proposal[n] == _argmax(target_probs[n]):
        n += 1
    bonus = _argmax(target_probs[n])
    return VerificationResult(n, list(proposal[:n]), bonus, prev_len + n + 1,
                              keep_rows=list(range(n + 1)))


def verify_sampling(
    proposal: Sequence[int],
    draft_probs,
    target_probs,
    rng: np.random.Generator,
    prev_len: int = 0,
) -> VerificationResult:
    """Speculative sampling: keep token x with probability min(1, p_T(x)/p_D(x)).

    On the first rejection the replacement is drawn from the normalized
    positive part of ``p_T - p_D``; after full acceptance one extra token
    is drawn from the next target row.
    """
    draft_probs, target_probs = _np(draft_probs), _np(target_probs)
    gamma = len(proposal)
    if draft_probs.shape[0] != gamma or target_probs.shape[0] != gamma + 1:
        raise ContractError("draft rows must equal gamma and target rows gamma + 1")
    for i, x in enumerate(proposal):
        pd, pt = draft_probs[i, x], target_probs[i, x]
        if pd == 0.0 or rng.random() < pt / pd:
            continue
        residual = np.maximum(target_probs[i] - draft_probs[i], 0.0)
        total = residual.sum()
        residual = residual / total if total > 0 else target_probs[i]
        bonus = sample_token(residual / residual.sum(), rng)
        return VerificationResult(i, list(proposal[:i]), bonus, prev_len + i + 1,
                                  keep_rows=list(range(i + 1)))
    bonus = sample_token(target_probs[gamma] / target_probs[gamma].sum(), rng)
    return VerificationResult(gamma, list(proposal), bonus, prev_len + gamma + 1,
                              keep_rows=list(range(gamma + 1)))


def verify_cape(lin: LinearizedProposal, target_probs, prev_len: int = 0) -> VerificationResult:
    """Greedy verification of a linearized expanded proposal.

    ``target_probs`` has ``beta + 1`` rows: row 0 for ``x_t`` and row ``i``
    for linearized token ``i``, computed under the expansion mask so an
    expansion token's row continues from (prefix, proposal before it, itself).
    """
    target_probs = _np(target_probs)
    gamma, beta = lin.gamma, lin.beta
    if target_probs.shape[0] != beta + 1:
        raise ContractError(f"need {beta + 1} target rows, got {target_probs.shape[0]}")
    accepted = []
    for i in range(1, gamma + 1):
        want = _argmax(target_probs[i - 1])
        if lin.tokens[i - 1] == want:
            accepted.append(want)
            continue
        e = lin.expansion_index(i, want)
        keep = list(range(i))
        if e is None:
            return VerificationResult(i - 1, accepted, want, prev_len + i, keep_rows=keep)
        bonus = _argmax(target_probs[e])
        return VerificationResult(i, accepted + [want], bonus, prev_len + i + 1,
                                  accepted_from_expansion=(i, want), keep_rows=keep + [e])
    bonus = _argmax(target_probs[gamma])
    return VerificationResult(gamma, accepted, bonus, prev_len + gamma + 1,
                              keep_rows=list(range(gamma + 1)))


def cape_chunk_mask(lin: LinearizedProposal) -> np.ndarray:
    """Mask over [x_t, linearized tokens]: x_t is visible to every row."""
    m = np.zeros((lin.beta + 1, lin.beta + 1), dtype=bool)
    m[:, 0] = True
    m[1:, 1:] = lin.mask.allow
    return m


@dataclass
class SessionResult:
    prompt: list[int]
    generated: list[int]
    trace: list[dict]

    @property
    def tokens(self) -> list[int]:
        return self.prompt + self.generated

    @property
    def rounds(self) -> int:
        return len(self.trace)

    @property
    def tokens_per_step(self) -> float:
        if not self.trace:
            return float("nan")
        return sum(r["commit_count"] for r in self.trace) / len(self.trace)


def _as_drafter(draft) -> Drafter:
    if isinstance(draft, GlideDraft):
        return DraftRunner(draft)
    return draft


def _cut_eos(tokens: list[int], eos: int | None) -> tuple[list[int], bool]:
    if eos is not None and eos in tokens:
        return tokens[: tokens.index(eos) + 1], True
    return tokens, False


def decode_session(
    prompt: Sequence[int],
    draft,
    target: TargetModel,
    strategy: str = GREEDY,
    cfg: SpeculationConfig = SpeculationConfig(),
    max_new: int = 32,
    cape: bool = False,
    seed: int = 0,
    eos: int | None = None,
    record_timings: bool = False,
) -> SessionResult:
    """Prefill, then repeat propose -> (expand) -> verify -> truncate until done."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ContractError("prompt must be non-empty")
    if strategy not in (GREEDY, SAMPLING):
        raise ContractError(f"unknown strategy {strategy!r}")
    if cape and strategy != GREEDY:
        raise ContractError("expanded proposals are verified greedily only")
    if len(prompt) + max_new > target.cfg.max_seq:
        raise CapacityError(f"prompt + max_new exceeds max_seq {target.cfg.max_seq}")
    rng = np.random.default_rng(seed)
    drafter = _as_drafter(draft)

    probs, cache = prefill(target, prompt)
    last = probs[-1].numpy()
    first = _argmax(last) if strategy == GREEDY else sample_token(last, rng)
    committed = prompt + [first]
    generated, done = _cut_eos([first], eos)
    trace: list[dict] = []

    while not done and len(generated) < max_new:
        c = len(committed)
        gamma = min(cfg.gamma, target.cfg.max_seq - c)
        t0 = time.perf_counter()
        prop = propose(drafter, committed, cache, cfg,
                       rng=rng if strategy == SAMPLING else None, gamma=gamma)
        lin = None
        if cape:
            lin = linearize(expand(prop, cfg), cfg)
        t1 = time.perf_counter()
        if lin is not None:
            positions = [c - 1] + [c - 1 + p for p in lin.posmap.positions]
            tprobs = target_forward(target, [committed[-1]] + lin.tokens, cache,
                                    positions=positions, chunk_mask=cape_chunk_mask(lin))
            res = verify_cape(lin, tprobs, prev_len=c)
        else:
            tprobs = target_forward(target, [committed[-1]] + prop.tokens, cache)
            if strategy == GREEDY:
                res = verify_greedy(prop.tokens, tprobs, prev_len=c)
            else:
                res = verify_sampling(prop.tokens, prop.dists, tprobs, rng, prev_len=c)
        t2 = time.perf_counter()
        cache.select(list(range(c - 1)) + [c - 1 + r for r in res.keep_rows])
        assert len(cache) == res.commit_len - 1

        new = res.committed
        committed = committed + new
        new, done = _cut_eos(new, eos)
        generated += new
        rec = {
            "round": len(trace) + 1,
            "proposal_tokens": prop.tokens,
            "confidences": prop.confidences,
            "set_sizes": lin.expanded.set_sizes if lin is not None else [0] * prop.gamma,
            "beta": lin.beta if lin is not None else prop.gamma,
            "accepted_len": res.accepted_len,
            "accepted_tokens": res.accepted_tokens,
            "bonus_token": res.bonus_token,
            "substitution": list(res.accepted_from_expansion) if res.accepted_from_expansion else None,
            "commit_len": res.commit_len,
            "commit_count": len(res.committed),
        }
        if record_timings:
            rec["draft_seconds"] = t1 - t0
            rec["verify_seconds"] = t2 - t1
        trace.append(rec)

    return SessionResult(prompt, generated[:max_new], trace)


def target_greedy_decode(
    target: TargetModel, prompt: Sequence[int], max_new: int, eos: int | None = None
) -> list[int]:
    """Reference decoder: one target step per token, no drafting."""
    probs, cache = prefill(target, list(prompt))
    out = []
    tok = _argmax(probs[-1])
    while True:
        out.append(tok)
        if len(out) >= max_new or (eos is not None and tok == eos):
            return out
        tok = _argmax(target_forward(target, [tok], cache)[-1])

"""Dense numeric kernels shared by the target and draft models.

Everything here works on ``torch.float64`` tensors so the same code path
serves inference, training and finite-difference gradient checks.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor

from .errors import ContractError

DTYPE = torch.float64
RMS_EPS = 1e-6


def as_matrix(x) -> Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if t.dim() != 2:
        raise ContractError(f"expected a 2-D matrix, got shape {tuple(t.shape)}")
    return t


def matmul(a, b) -> Tensor:
    """Matrix product with a shape check on the inner dimension."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def masked_softmax(logits: Tensor, allow: Tensor, dim: int = -1) -> Tensor:
    """Softmax over the entries where ``allow`` is true.

    Disallowed entries come out as exactly 0. A row with no allowed entry
    returns all zeros and carries no gradient back into ``logits``.
    """
    allow = torch.as_tensor(allow, dtype=torch.bool)
    if allow.shape != logits.shape:
        try:
            allow = allow.expand_as(logits)
        except RuntimeError:
            raise ContractError(
                f"mask shape {tuple(allow.shape)} does not match logits {tuple(logits.shape)}"
            ) from None
    any_allowed = allow.any(dim=dim, keepdim=True)
    scores = logits.masked_fill(~allow, float("-inf"))
    scores = torch.where(any_allowed, scores, torch.zeros_like(scores))
    probs = torch.softmax(scores, dim=dim)
    return probs * allow


def rmsnorm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    gain = torch.as_tensor(gain, dtype=x.dtype)
    if gain.shape[-1] != x.shape[-1]:
        raise ContractError(f"gain width {gain.shape[-1]} != input width {x.shape[-1]}")
    ms = x.pow(2).mean(dim=-1, keepdim=True)
    return x * torch.rsqrt(ms + eps) * gain.reshape(-1)


def check_distribution(p, tol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ContractError("distribution must be a non-empty vector")
    if np.any(p < 0) or np.any(p > 1 + tol) or abs(p.sum() - 1.0) > tol:
        raise ContractError(f"not a probability vector (sum={p.sum()!r})")
    return p


def sample_token(dist, rng: np.random.Generator) -> int:
    """Draw one token by inverse-CDF lookup on a single uniform variate.

    ``rng`` is a ``numpy.random.Generator`` (PCG64 via ``default_rng``);
    exactly one ``rng.random()`` call is consumed per draw, so a run is
    replayable from its seed.
    """
    p = check_distribution(dist)
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    # Clamp for u landing on the last edge; skip trailing zero-mass entries.
    idx = min(idx, p.size - 1)
    while p[idx] == 0.0 and idx > 0:
        idx -= 1
    return idx

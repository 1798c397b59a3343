"""Synthetic corpora, target pretraining and draft training against a frozen target."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .errors import CheckpointFormatError, ContractError, TrainingDivergedError
from .masks import block_mask
from .model import GlideConfig, GlideDraft, TargetModel

log = logging.getLogger(__name__)

# -- corpora -----------------------------------------------------------------

CORPUS_MAGIC = struct.unpack("<I", b"SPDC")[0]
CORPUS_VERSION = 1


@dataclass(frozen=True)
class CorpusSpec:
    kind: str = "grammar"  # "markov2" | "grammar"
    vocab: int = 32
    length: int = 48
    count: int = 2048
    seed: int = 0


def _markov2_table(vocab: int, rng: np.random.Generator, concentration: float = 0.1) -> np.ndarray:
    return rng.dirichlet(np.full(vocab, concentration), size=(vocab, vocab))


def generate_corpus(kind: str, vocab: int, length: int, count: int, seed: int) -> np.ndarray:
    """``(count, length)`` int array of synthetic token sequences.

    ``markov2``: a fixed random order-2 Markov chain (the table is drawn from
    ``seed``). ``grammar``: each sequence draws a few random phrases and
    then concatenates phrases picked at random, so later text is mostly
    predictable only by copying from earlier context.
    """
    if vocab < 2 or length < 2 or count < 0:
        raise ContractError("need vocab >= 2, length >= 2, count >= 0")
    rng = np.random.default_rng(seed)
    out = np.empty((count, length), dtype=np.int64)
    if kind == "markov2":
        table = _markov2_table(vocab, np.random.default_rng([seed, 7919]))
        cdf = np.cumsum(table, axis=-1)
        for s in range(count):
            a, b = rng.integers(vocab, size=2)
            out[s, 0], out[s, 1] = a, b
            for i in range(2, length):
                c = min(int(np.searchsorted(cdf[a, b], rng.random(), side="right")), vocab - 1)
                out[s, i] = c
                a, b = b, c
    elif kind == "grammar":
        for s in range(count):
            n_phrases = int(rng.integers(1, 4))
            phrases = [rng.integers(vocab, size=int(rng.integers(3, 7))) for _ in range(n_phrases)]
            seq: list[int] = []
            while len(seq) < length:
                seq.extend(phrases[int(rng.integers(n_phrases))].tolist())
            out[s] = seq[:length]
    else:
        raise ContractError(f"unknown corpus kind {kind!r}")
    return out


def corpus_from_spec(spec: CorpusSpec) -> np.ndarray:
    return generate_corpus(spec.kind, spec.vocab, spec.length, spec.count, spec.seed)


def write_corpus(path, sequences: Sequence[Sequence[int]], vocab: int) -> Path:
    path = Path(path)
    parts = [struct.pack("<4I", CORPUS_MAGIC, CORPUS_VERSION, vocab, len(sequences))]
    for seq in sequences:
        seq = np.asarray(seq, dtype="<u4")
        parts.append(struct.pack("<I", seq.size))
        parts.append(seq.tobytes())
    path.write_bytes(b"".join(parts))
    return path


def read_corpus(path) -> tuple[int, list[np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise CheckpointFormatError("truncated corpus header")
    magic, version, vocab, count = struct.unpack_from("<4I", data, 0)
    if magic != CORPUS_MAGIC:
        raise CheckpointFormatError("bad corpus magic")
    if version != CORPUS_VERSION:
        raise CheckpointFormatError(f"unsupported corpus version {version}")
    off, seqs = 16, []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        seqs.append(np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int64))
        off += 4 * n
    if off != len(data):
        raise CheckpointFormatError("trailing bytes after last sequence")
    return vocab, seqs


def split_corpus(seqs: np.ndarray, eval_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    n_eval = max(1, int(round(len(seqs) * eval_fraction)))
    return seqs[:-n_eval], seqs[-n_eval:]


# -- configuration -----------------------------------------------------------


@dataclass
class TrainingConfig:
    block_length: int = 5
    batch_size: int = 16
    grad_accum: int = 1
    learning_rate: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.block_length < 1:
            raise ContractError("block_length must be >= 1")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")
        self.betas = tuple(self.betas)


def make_optimizer(params, cfg: TrainingConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay
    )


def iter_batches(data: np.ndarray, batch_size: int, seed: int, epochs: int = 1) -> Iterator[Tensor]:
    rng = np.random.default_rng([seed, 31337])
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for i in range(0, len(order) - batch_size + 1, batch_size):
            yield torch.as_tensor(data[order[i : i + batch_size]])


# -- losses ------------------------------------------------------------------


def lm_loss(logits: Tensor, tokens: Tensor) -> Tensor:
    """Mean next-token cross-entropy over every position that has a label."""
    return nn.functional.cross_entropy(
        logits[:, :-1].reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1)
    )


def target_kv(target: TargetModel, tokens: Tensor) -> list[tuple[Tensor, Tensor]]:
    """Full-sequence causal K/V of every target layer, computed once per batch."""
    with torch.no_grad():
        _, kv = target(tokens)
    return kv


def training_cross_mask(seq_len: int, block_length: int) -> Tensor:
    m = block_mask(range(1, seq_len + 1), seq_len, block_length)
    return torch.as_tensor(np.array(m.allow))


def draft_logits(draft: GlideDraft, target: TargetModel, tokens: Tensor, block_length: int,
                 span_log: list | None = None) -> Tensor:
    T = tokens.shape[-1]
    kv = target_kv(target, tokens) if draft.cfg.cross_attention else None
    allow = training_cross_mask(T, block_length) if kv is not None else None
    logits, _ = draft(tokens, torch.arange(T), kv, allow, span_log=span_log)
    return logits


def draft_loss(draft, target, tokens, block_length) -> Tensor:
    return lm_loss(draft_logits(draft, target, tokens, block_length), tokens)


def _grad_norm(params) -> float:
    sq = sum(float((p.grad**2).sum()) for p in params if p.grad is not None)
    return math.sqrt(sq)


def train_step(draft: GlideDraft, target: TargetModel, batch: Tensor, cfg: TrainingConfig,
               optimizer: torch.optim.Optimizer) -> tuple[float, float]:
    """One AdamW update of the draft; returns (loss, grad_norm).

    The batch is split into ``cfg.grad_accum`` micro-batches whose gradients
    are averaged before the update. Target parameters are never touched.
    """
    optimizer.zero_grad(set_to_none=True)
    chunks = torch.chunk(batch, cfg.grad_accum)
    total = 0.0
    for chunk in chunks:
        loss = draft_loss(draft, target, chunk, cfg.block_length) * (len(chunk) / len(batch))
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {float(loss)} on batch of {len(batch)}")
        loss.backward()
        total += float(loss.detach())
    params = [p for p in draft.parameters() if p.requires_grad]
    gn = _grad_norm(params)
    optimizer.step()
    return total, gn


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def add(self, step, loss, grad_norm, lr):
        self.rows.append((step, loss, grad_norm, lr))

    @property
    def losses(self) -> list[float]:
        return [r[1] for r in self.rows]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "grad_norm", "lr"])
            for step, loss, gn, lr in self.rows:
                w.writerow([step, repr(loss), repr(gn), repr(lr)])
        return path


def _freeze(target: TargetModel) -> None:
    target.eval()
    for p in target.parameters():
        p.requires_grad_(False)


def train_draft(draft: GlideDraft, target: TargetModel, data: np.ndarray,
                cfg: TrainingConfig) -> TrainLog:
    _freeze(target)
    before = target.checksum()
    opt = make_optimizer(draft.parameters(), cfg)
    tlog = TrainLog()
    for step, batch in enumerate(iter_batches(data, cfg.batch_size, cfg.seed, cfg.epochs), 1):
        loss, gn = train_step(draft, target, batch, cfg, opt)
        if step % cfg.log_every == 0:
            tlog.add(step, loss, gn, cfg.learning_rate)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    if target.checksum() != before:
        raise RuntimeError("target parameters changed during draft training")
    return tlog


def train_target(target: TargetModel, data: np.ndarray, cfg: TrainingConfig) -> TrainLog:
    """Plain language-model pretraining for the toy target (before freezing)."""
    opt = make_optimizer(target.parameters(), cfg)
    tlog = TrainLog()
    target.train()
    for step, batch in enumerate(iter_batches(data, cfg.batch_size, cfg.seed, cfg.epochs), 1):
        opt.zero_grad(set_to_none=True)
        logits, _ = target(batch)
        loss = lm_loss(logits, batch)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite target loss at step {step}")
        loss.backward()
        gn = _grad_norm(list(target.parameters()))
        opt.step()
        if step % cfg.log_every == 0:
            tlog.add(step, float(loss.detach()), gn, cfg.learning_rate)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    _freeze(target)
    return tlog


# -- gradient checking -------------------------------------------------------


def grad_check(draft: GlideDraft, target: TargetModel, batch: Tensor, block_length: int = 5,
               h: float = 1e-6, max_entries: int | None = 48, seed: int = 0) -> dict[str, float]:
    """Central finite differences against autograd, per parameter tensor.

    Returns the relative error ``|g_fd - g_ad| / (|g_fd| + |g_ad|)`` (vector
    norms over the checked entries) for each parameter, plus ``"max"``.
    ``max_entries`` caps the entries checked per tensor (a fixed random
    subset); ``None`` checks all of them.
    """
    batch = torch.as_tensor(batch)
    for p in draft.parameters():
        p.grad = None
    loss = draft_loss(draft, target, batch, block_length)
    loss.backward()
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for name, p in draft.named_parameters():
            flat = p.view(-1)
            analytic = p.grad.reshape(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and idx.size > max_entries:
                idx = np.sort(rng.choice(idx, size=max_entries, replace=False))
            num = np.empty(idx.size)
            for n, i in enumerate(idx):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(draft_loss(draft, target, batch, block_length))
                flat[i] = orig - h
                down = float(draft_loss(draft, target, batch, block_length))
                flat[i] = orig
                num[n] = (up - down) / (2 * h)
            ana = analytic[torch.as_tensor(idx)].numpy()
            denom = np.linalg.norm(num) + np.linalg.norm(ana)
            errors[name] = float(np.linalg.norm(num - ana) / denom) if denom > 0 else 0.0
    errors["max"] = max(errors.values())
    return errors


# -- paired training ---------------------------------------------------------


def acceptance_on(draft: GlideDraft, target: TargetModel, data: np.ndarray,
                  block_length: int, batch_size: int = 64) -> float:
    """Mean over positions of sum_x min(p_T(x), p_D(x)) on teacher-forced text.

    Draft distributions come from the block-masked pass, i.e. the same
    delayed view of the target cache the draft gets while speculating.
    """
    from .bench import acceptance_rate_exact

    pds, pts = [], []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            tokens = torch.as_tensor(data[i : i + batch_size])
            pd = torch.softmax(draft_logits(draft, target, tokens, block_length), -1)
            pt = torch.softmax(target(tokens)[0], -1)
            pds.append(pd[:, :-1].reshape(-1, pd.shape[-1]).numpy())
            pts.append(pt[:, :-1].reshape(-1, pt.shape[-1]).numpy())
    return acceptance_rate_exact(np.concatenate(pds), np.concatenate(pts))


@dataclass
class PairResult:
    glide: GlideDraft
    vanilla: GlideDraft
    glide_log: TrainLog
    vanilla_log: TrainLog
    glide_alpha: float
    vanilla_alpha: float

    def report(self) -> dict:
        return {
            "glide_alpha": self.glide_alpha,
            "vanilla_alpha": self.vanilla_alpha,
            "glide_loss_first": self.glide_log.losses[0],
            "glide_loss_last": self.glide_log.losses[-1],
            "vanilla_loss_first": self.vanilla_log.losses[0],
            "vanilla_loss_last": self.vanilla_log.losses[-1],
        }


def train_pair(gcfg: GlideConfig, tcfg: TrainingConfig, target: TargetModel,
               train: np.ndarray, held_out: np.ndarray) -> PairResult:
    """Train a cache-reading draft and its cross-attention-free twin identically."""
    glide = GlideDraft(gcfg, seed=tcfg.seed)
    vanilla = GlideDraft(gcfg.vanilla(), seed=tcfg.seed)
    glog = train_draft(glide, target, train, tcfg)
    vlog = train_draft(vanilla, target, train, tcfg)
    ga = acceptance_on(glide, target, held_out, tcfg.block_length)
    va = acceptance_on(vanilla, target, held_out, tcfg.block_length)
    log.info("glide alpha %.4f vs vanilla alpha %.4f", ga, va)
    return PairResult(glide, vanilla, glog, vlog, ga, va)


def config_dict(cfg) -> dict:
    return asdict(cfg)

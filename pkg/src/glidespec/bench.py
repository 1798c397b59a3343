"""Speculative-decoding metrics and experiment orchestration."""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import ContractError
from .model import (
    GlideConfig,
    GlideDraft,
    TargetConfig,
    TargetModel,
    glide_forward,
    load_checkpoint,
    prefill,
    save_checkpoint,
)
from .speculation import SpeculationConfig, confidence_acceptance_profile, profile_from_trace
from .training import (
    CorpusSpec,
    TrainingConfig,
    acceptance_on,
    corpus_from_spec,
    split_corpus,
    train_draft,
    train_target,
)
from .verification import GREEDY, SAMPLING, decode_session, target_greedy_decode

log = logging.getLogger(__name__)


def acceptance_rate_exact(draft_dists, target_dists) -> float:
    """Mean over positions of sum_x min(p_T(x), p_D(x))."""
    pd = np.asarray(draft_dists, dtype=np.float64)
    pt = np.asarray(target_dists, dtype=np.float64)
    if pd.shape != pt.shape:
        raise ContractError(f"shape mismatch {pd.shape} vs {pt.shape}")
    if pd.size == 0:
        raise ContractError("acceptance rate of an empty evaluation set is undefined")
    pd = pd.reshape(-1, pd.shape[-1])
    pt = pt.reshape(-1, pt.shape[-1])
    return float(np.minimum(pd, pt).sum(axis=1).mean())


def expected_speedup(alpha: float, gamma: int, cost: float) -> float:
    """Expected walltime improvement (1 - a^(g+1)) / ((1 - a)(g c + 1)).

    At ``alpha == 1`` the limit ``(g + 1) / (g c + 1)`` is returned.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    if gamma < 1:
        raise ContractError("gamma must be >= 1")
    if cost < 0:
        raise ContractError("cost must be >= 0")
    denom = gamma * cost + 1.0
    if alpha == 1.0:
        return (gamma + 1) / denom
    return (1.0 - alpha ** (gamma + 1)) / ((1.0 - alpha) * denom)


def expected_tokens_per_step(alpha: float, gamma: int) -> float:
    return expected_speedup(alpha, gamma, 0.0)


@dataclass
class MetricsRecord:
    alpha: float
    cost: float
    gamma: int
    expected_speedup: float
    empirical_tokens_per_step: float | None = None
    empirical_speedup: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha outside [0, 1]")
        if self.cost <= 0:
            raise ContractError("cost must be > 0")


# -- cost coefficient -------------------------------------------------------


def _draft_call(draft: GlideDraft, ctx: Sequence[int], cache):
    return lambda: glide_forward(draft, ctx, cache, len(ctx))


def _target_call(target: TargetModel, ctx: Sequence[int]):
    return lambda: prefill(target, ctx)


def _timed(fn: Callable[[], object], inner: int) -> float:
    t0 = time.perf_counter()
    for _ in range(inner):
        fn()
    return (time.perf_counter() - t0) / inner


def measure_cost_coefficient(draft, target: TargetModel, trials: int = 100, seq_len: int = 16,
                             warmup: int = 10, min_seconds: float = 2e-4) -> float:
    """Median single-forward walltime of the draft over that of the target.

    ``draft`` may be a draft model or another target (self-ratio checks).
    Each timed sample repeats the forward until it spans at least
    ``min_seconds`` so timer resolution does not dominate.
    """
    ctx = [i % target.cfg.vocab_size for i in range(seq_len)]
    _, cache = prefill(target, ctx[:-1])
    if isinstance(draft, TargetModel):
        d_fn = _target_call(draft, ctx)
    else:
        d_fn = _draft_call(draft, ctx, cache)
    t_fn = _target_call(target, ctx)
    inner = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            d_fn()
        if time.perf_counter() - t0 >= min_seconds or inner >= 1 << 12:
            break
        inner *= 2
    for _ in range(warmup):
        d_fn()
        t_fn()
    # interleave the two models so slow drift in machine load hits both alike
    d_samples, t_samples = [], []
    for _ in range(trials):
        d_samples.append(_timed(d_fn, inner))
        t_samples.append(_timed(t_fn, inner))
    d, t = statistics.median(d_samples), statistics.median(t_samples)
    return d / t


def flop_cost_coefficient(gcfg: GlideConfig | TargetConfig, tcfg: TargetConfig,
                          context: int = 64) -> float:
    """Deterministic per-token multiply-accumulate ratio (draft / target)."""
    return _macs(gcfg, context) / _macs(tcfg, context)


def _macs(cfg, context: int) -> float:
    if isinstance(cfg, TargetConfig):
        d, layers, ffn, V = cfg.model_dim, cfg.n_layers, cfg.ffn_dim, cfg.vocab_size
        per_layer = 4 * d * d + 3 * d * ffn + 2 * context * d
    else:
        d, layers, ffn, V = cfg.draft_dim, cfg.n_layers, cfg.ffn_dim, cfg.vocab_size
        per_layer = 4 * d * d + 3 * d * ffn + 2 * context * d
        if cfg.cross_attention:
            hd = cfg.target.model_dim
            per_layer += 2 * d * hd + 2 * context * hd
    return layers * per_layer + d * V


# -- experiment configuration ------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything a train/bench/sweep run needs; loadable from a JSON file.

    Model shapes are plain dicts so the file format stays flat JSON.
    Checkpoint paths, when given, take precedence over training.
    """

    target: dict = field(default_factory=dict)
    draft: dict = field(default_factory=dict)
    corpus: dict = field(default_factory=dict)
    target_train: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    target_checkpoint: str | None = None
    draft_checkpoint: str | None = None
    vanilla_checkpoint: str | None = None
    train_vanilla: bool = True
    strategy: str = GREEDY
    gamma: int = 5
    max_verify_tokens: int = 32
    fixed_expansion: int = 4
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    repetitions: int = 1
    n_prompts: int = 8
    prompt_len: int = 8
    max_new: int = 32
    cost: str = "flop"
    cost_trials: int = 100
    measure_walltime: bool = False
    output_dir: str = "runs"

    def __post_init__(self):
        if self.strategy not in (GREEDY, SAMPLING):
            raise ContractError(f"strategy must be {GREEDY!r} or {SAMPLING!r}")
        if self.cost not in ("flop", "measured"):
            raise ContractError("cost must be 'flop' or 'measured'")
        if not self.seeds or self.repetitions < 1 or self.gamma < 1:
            raise ContractError("need at least one seed, one repetition and gamma >= 1")
        self.seeds = [int(s) for s in self.seeds]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text()))
        # relative checkpoint paths are resolved against the config file
        for name in ("target_checkpoint", "draft_checkpoint", "vanilla_checkpoint"):
            value = getattr(cfg, name)
            if value is not None and not Path(value).is_absolute():
                setattr(cfg, name, str(path.parent / value))
        if not Path(cfg.output_dir).is_absolute():
            cfg.output_dir = str(path.parent / cfg.output_dir)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def target_config(self) -> TargetConfig:
        return TargetConfig(**self.target)

    def glide_config(self, target_cfg: TargetConfig | None = None) -> GlideConfig:
        return GlideConfig(target=target_cfg or self.target_config(), **self.draft)

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(**self.corpus)

    def train_config(self) -> TrainingConfig:
        return TrainingConfig(**self.train)

    def spec_config(self, fixed_expansion: int | None = None) -> SpeculationConfig:
        return SpeculationConfig(gamma=self.gamma, max_verify_tokens=self.max_verify_tokens,
                                 fixed_expansion=fixed_expansion)


def _require_files(cfg: ExperimentConfig, *names: str) -> None:
    for name in names:
        value = getattr(cfg, name)
        if value is None:
            raise ContractError(f"{name} is required")
        if not Path(value).is_file():
            raise FileNotFoundError(f"{name} {value} does not exist")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _held_out(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    return split_corpus(corpus_from_spec(cfg.corpus_spec()))


def train_from_config(cfg: ExperimentConfig) -> dict:
    """Train (or load) the target, then the cache-reading draft and its ablation twin.

    Writes checkpoints and CSV logs into ``cfg.output_dir`` and returns a
    summary dict that is also written as ``train_report.json``.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, held = _held_out(cfg)
    if cfg.target_checkpoint is not None:
        _require_files(cfg, "target_checkpoint")
        target = load_checkpoint(cfg.target_checkpoint)
        target_path = Path(cfg.target_checkpoint)
    else:
        tcfg = cfg.target_config()
        target = TargetModel(tcfg, seed=int(cfg.target_train.get("seed", 0)))
        tlog = train_target(target, train, TrainingConfig(**cfg.target_train))
        tlog.write_csv(out / "target_log.csv")
        target_path = save_checkpoint(target, out / "target.ckpt")
    if not isinstance(target, TargetModel):
        raise ContractError("target checkpoint does not hold a target model")
    tr = cfg.train_config()
    summary: dict = {"target_checkpoint": str(target_path), "target_checksum": target.checksum()}
    variants = [("glide", cfg.glide_config(target.cfg))]
    if cfg.train_vanilla:
        variants.append(("vanilla", cfg.glide_config(target.cfg).vanilla()))
    for name, gcfg in variants:
        draft = GlideDraft(gcfg, seed=tr.seed)
        dlog = train_draft(draft, target, train, tr)
        dlog.write_csv(out / f"{name}_log.csv")
        path = save_checkpoint(draft, out / f"{name}.ckpt")
        summary[name] = {
            "checkpoint": str(path),
            "alpha": acceptance_on(draft, target, held, tr.block_length),
            "loss_first": dlog.losses[0] if dlog.losses else None,
            "loss_last": dlog.losses[-1] if dlog.losses else None,
        }
    (out / "train_report.json").write_text(_dump(summary))
    return summary


# -- benchmark run -----------------------------------------------------------


def _mean_std(values: Sequence[float]) -> dict:
    values = [float(v) for v in values]
    return {"mean": statistics.fmean(values),
            "stddev": statistics.stdev(values) if len(values) > 1 else 0.0}


def _prompts(held: np.ndarray, cfg: ExperimentConfig, seed: int) -> list[list[int]]:
    rng = np.random.default_rng([seed, 17])
    rows = rng.choice(len(held), size=min(cfg.n_prompts, len(held)), replace=False)
    return [held[r, : cfg.prompt_len].tolist() for r in sorted(rows)]


def _cost(cfg: ExperimentConfig, draft: GlideDraft, target: TargetModel) -> float:
    if cfg.cost == "flop":
        return flop_cost_coefficient(draft.cfg, target.cfg)
    return measure_cost_coefficient(draft, target, trials=cfg.cost_trials)


def _decode_all(prompts, draft, target, cfg: ExperimentConfig, seed: int, cape: bool,
                fixed: int | None = None):
    max_new = min(cfg.max_new, target.cfg.max_seq - cfg.prompt_len)
    return [
        decode_session(p, draft, target, cfg.strategy, cfg.spec_config(fixed), max_new=max_new,
                       cape=cape, seed=seed * 1000 + k, record_timings=cfg.measure_walltime)
        for k, p in enumerate(prompts)
    ]


def _tokens_per_step(sessions) -> float:
    rounds = sum(s.rounds for s in sessions)
    return sum(r["commit_count"] for s in sessions for r in s.trace) / rounds if rounds else math.nan


def _walltime_speedup(sessions, target: TargetModel) -> float:
    sd = sum(r["draft_seconds"] + r["verify_seconds"] for s in sessions for r in s.trace)
    t0 = time.perf_counter()
    for s in sessions:
        target_greedy_decode(target, s.prompt, len(s.generated))
    return (time.perf_counter() - t0) / sd if sd > 0 else math.nan


def _seed_record(seed, cfg, draft, target, held, alpha, cost) -> tuple[dict, list]:
    prompts = _prompts(held, cfg, seed)
    runs = [_decode_all(prompts, draft, target, cfg, seed, cape=False)
            for _ in range(cfg.repetitions)]
    plain = runs[0]
    rec: dict = {
        "seed": seed,
        "n_prompts": len(prompts),
        "repetitions_identical": all(
            [s.generated for s in r] == [s.generated for s in plain] for r in runs[1:]),
    }
    tps = _tokens_per_step(plain)
    metrics = MetricsRecord(alpha=alpha, cost=cost, gamma=cfg.gamma,
                            expected_speedup=expected_speedup(alpha, cfg.gamma, cost),
                            empirical_tokens_per_step=tps,
                            empirical_speedup=tps / (cfg.gamma * cost + 1.0))
    rec["metrics"] = asdict(metrics)
    profile_log = [x for s in plain for x in profile_from_trace(s.trace)]
    if cfg.strategy == GREEDY:
        cape_aware = _decode_all(prompts, draft, target, cfg, seed, cape=True)
        cape_fixed = _decode_all(prompts, draft, target, cfg, seed, cape=True,
                                 fixed=cfg.fixed_expansion)
        reference = [target_greedy_decode(target, p, len(s.generated))
                     for p, s in zip(prompts, plain)]
        rec["lossless"] = all(
            [s.generated for s in runs_] == reference for runs_ in (plain, cape_aware, cape_fixed))
        rec["expansion"] = {
            "confidence_aware_tokens_per_step": _tokens_per_step(cape_aware),
            "fixed_size": cfg.fixed_expansion,
            "fixed_tokens_per_step": _tokens_per_step(cape_fixed),
        }
    else:
        rec["lossless"] = None
    if cfg.measure_walltime:
        rec["walltime_speedup"] = _walltime_speedup(plain, target)
    return rec, profile_log


def profile_summary(log: list[tuple[float, bool]], n_buckets: int = 10) -> dict:
    buckets = confidence_acceptance_profile(log, n_buckets)
    out = {
        "buckets": [{"index": b.index, "lo": b.lo, "hi": b.hi, "count": b.count,
                     "accepted": b.accepted, "fraction": b.fraction} for b in buckets],
        "spearman": None,
    }
    if len(buckets) >= 2:
        rho = stats.spearmanr([b.midpoint for b in buckets], [b.fraction for b in buckets])[0]
        out["spearman"] = None if math.isnan(rho) else float(rho)
    return out


def run_experiment(cfg: ExperimentConfig, report_path=None) -> dict:
    """Decode held-out prompts with the configured pair and assemble a JSON report.

    The report is rewritten after each seed (``"complete": false``) so an
    error part-way leaves the finished seeds on disk.
    """
    _require_files(cfg, "target_checkpoint", "draft_checkpoint")
    target = load_checkpoint(cfg.target_checkpoint)
    draft = load_checkpoint(cfg.draft_checkpoint)
    if not isinstance(target, TargetModel) or not isinstance(draft, GlideDraft):
        raise ContractError("expected a target checkpoint and a draft checkpoint")
    if draft.cfg.target.n_layers > target.cfg.n_layers or draft.cfg.vocab_size != target.cfg.vocab_size:
        raise ContractError("draft and target checkpoints are incompatible")
    _, held = _held_out(cfg)
    alpha = acceptance_on(draft, target, held, draft.cfg.block_length)
    cost = _cost(cfg, draft, target)
    report: dict = {
        "config": cfg.to_dict(),
        "models": {"target_checksum": target.checksum(), "draft_checksum": draft.checksum()},
        "alpha": alpha,
        "cost": cost,
        "cost_method": cfg.cost,
        "per_seed": [],
        "complete": False,
    }
    path = Path(report_path) if report_path is not None else None
    profile_log: list = []
    for seed in cfg.seeds:
        rec, plog = _seed_record(seed, cfg, draft, target, held, alpha, cost)
        report["per_seed"].append(rec)
        profile_log += plog
        if path is not None:
            path.write_text(_dump(report))
    per = report["per_seed"]
    agg = {
        "empirical_tokens_per_step": _mean_std([r["metrics"]["empirical_tokens_per_step"] for r in per]),
        "empirical_speedup": _mean_std([r["metrics"]["empirical_speedup"] for r in per]),
        "expected_speedup": _mean_std([r["metrics"]["expected_speedup"] for r in per]),
    }
    if cfg.strategy == GREEDY:
        agg["lossless"] = all(r["lossless"] for r in per)
        for key in ("confidence_aware_tokens_per_step", "fixed_tokens_per_step"):
            agg[key] = _mean_std([r["expansion"][key] for r in per])
    if cfg.measure_walltime:
        agg["walltime_speedup"] = _mean_std([r["walltime_speedup"] for r in per])
    report["aggregate"] = agg
    report["confidence_profile"] = profile_summary(profile_log)
    report["complete"] = True
    if path is not None:
        path.write_text(_dump(report))
    return report


def report_json(report: dict) -> str:
    return _dump(report)


# -- sweeps ------------------------------------------------------------------

SWEEP_AXES = ("n_layers", "d_D", "gamma")


@dataclass
class SweepRow:
    value: int
    alpha: float | None = None
    cost: float | None = None
    expected_speedup: float | None = None
    error: str | None = None


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence[int], target: TargetModel | None = None,
          draft: GlideDraft | None = None) -> list[SweepRow]:
    """Train and evaluate one draft per grid value; failures are recorded per row.

    A ``gamma`` sweep reuses one trained draft (gamma only enters the
    formula). ``target``/``draft`` override the checkpoints in ``cfg``.
    """
    if axis not in SWEEP_AXES:
        raise ContractError(f"axis must be one of {SWEEP_AXES}")
    if not values:
        raise ContractError("sweep needs at least one value")
    if target is None:
        _require_files(cfg, "target_checkpoint")
        target = load_checkpoint(cfg.target_checkpoint)
    train, held = _held_out(cfg)
    tr = cfg.train_config()

    def trained(gcfg: GlideConfig) -> GlideDraft:
        d = GlideDraft(gcfg, seed=tr.seed)
        train_draft(d, target, train, tr)
        return d

    rows = []
    shared = None
    for value in values:
        row = SweepRow(int(value))
        try:
            if axis == "gamma":
                if shared is None:
                    shared = draft
                    if shared is None and cfg.draft_checkpoint is not None:
                        shared = load_checkpoint(cfg.draft_checkpoint)
                    if shared is None:
                        shared = trained(cfg.glide_config(target.cfg))
                    shared_alpha = acceptance_on(shared, target, held, shared.cfg.block_length)
                    shared_cost = _cost(cfg, shared, target)
                d, gamma = shared, int(value)
                row.alpha, row.cost = shared_alpha, shared_cost
            else:
                key = "n_layers" if axis == "n_layers" else "draft_dim"
                d = trained(replace(cfg.glide_config(target.cfg), **{key: int(value)}))
                gamma = cfg.gamma
                row.alpha = acceptance_on(d, target, held, d.cfg.block_length)
                row.cost = _cost(cfg, d, target)
            row.expected_speedup = expected_speedup(row.alpha, gamma, row.cost)
        except Exception as exc:  # noqa: BLE001 - recorded and the sweep continues
            log.warning("sweep %s=%s failed: %s", axis, value, exc)
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows

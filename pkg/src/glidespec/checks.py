"""Self-checks run by ``glidespec check``: formula regression, mask oracles, losslessness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bench import expected_speedup
from .masks import PositionMap, block_mask, cape_mask, validate_mask_semantics
from .model import GlideConfig, GlideDraft, TargetConfig, TargetModel
from .speculation import SpeculationConfig
from .verification import GREEDY, decode_session, target_greedy_decode

# (acceptance rate, cost coefficient, printed expected speedup) at gamma = 5
TABLE1 = (
    (0.648, 0.067, 1.97),
    (0.516, 0.077, 1.46),
    (0.671, 0.055, 2.16),
    (0.601, 0.066, 1.80),
)
TABLE1_TOL = 0.005


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail}"


def check_table1(rows=TABLE1, gamma: int = 5, tol: float = TABLE1_TOL) -> list[CheckResult]:
    out = []
    for alpha, cost, printed in rows:
        got = expected_speedup(alpha, gamma, cost)
        out.append(CheckResult(
            f"speedup({alpha}, {gamma}, {cost})",
            abs(got - printed) <= tol,
            f"computed {got:.4f}, printed {printed:.2f}, |diff| {abs(got - printed):.4f} (tol {tol})",
        ))
    return out


def check_masks(n_cases: int = 1000, seed: int = 0, block_length: int = 5,
                max_seq: int = 40) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    bad = None
    for _ in range(n_cases):
        sizes = rng.choice([0, 1, 3, 5, 7], size=int(rng.integers(1, 9))).tolist()
        pm = PositionMap.from_set_sizes(sizes)
        rep = validate_mask_semantics(cape_mask(len(sizes), pm), "cape", posmap=pm)
        if not rep:
            bad = f"sizes {sizes}: {rep}"
            break
    cape = CheckResult("expansion mask oracle", bad is None,
                       bad or f"{n_cases} random expansion-size vectors match")
    bad = None
    for n in range(1, max_seq + 1):
        q = range(1, n + 1)
        rep = validate_mask_semantics(block_mask(q, n, block_length), "block",
                                      query_positions=q, kv_len=n)
        if not rep:
            bad = f"length {n}: {rep}"
            break
    block = CheckResult("block mask oracle", bad is None,
                        bad or f"all lengths 1..{max_seq} at block length {block_length} match")
    return [cape, block]


def random_instance(seed: int):
    """Small random target/draft pair and prompt (V <= 64, max_seq 64)."""
    rng = np.random.default_rng([seed, 4242])
    V = int(rng.integers(4, 65))
    tcfg = TargetConfig(n_layers=int(rng.integers(1, 3)), n_heads=2, head_dim=8, vocab_size=V,
                        max_seq=64, ffn_dim=32)
    target = TargetModel(tcfg, seed=seed, init_std=0.6)
    draft = GlideDraft(GlideConfig(target=tcfg, n_layers=1, draft_dim=16, n_heads=2, ffn_dim=32),
                       seed=seed + 1, init_std=0.6)
    prompt = rng.integers(V, size=int(rng.integers(1, 9))).tolist()
    gamma = int(rng.integers(1, 8))
    return target, draft, prompt, gamma


def check_lossless(n_instances: int = 20, max_new: int = 24) -> list[CheckResult]:
    fails = {False: [], True: []}
    for seed in range(n_instances):
        target, draft, prompt, gamma = random_instance(seed)
        ref = target_greedy_decode(target, prompt, max_new)
        for cape in (False, True):
            out = decode_session(prompt, draft, target, GREEDY, SpeculationConfig(gamma=gamma),
                                 max_new=max_new, cape=cape, seed=seed)
            if out.generated != ref:
                fails[cape].append(seed)
    return [
        CheckResult(f"greedy losslessness ({'expanded' if cape else 'plain'})", not fails[cape],
                    f"{n_instances - len(fails[cape])}/{n_instances} instances match target-only decoding")
        for cape in (False, True)
    ]

import numpy as np
import pytest
import torch

from glidespec.model import GlideConfig, GlideDraft, TargetConfig, TargetModel, prefill

torch.set_num_threads(1)


def random_pair(seed: int, vocab: int | None = None, n_layers: int = 2, draft_layers: int = 1):
    """Random toy target/draft with peaked distributions (few near-ties)."""
    rng = np.random.default_rng(seed)
    V = vocab or int(rng.integers(4, 65))
    tcfg = TargetConfig(n_layers=n_layers, n_heads=2, head_dim=8, vocab_size=V, max_seq=64,
                        ffn_dim=32)
    target = TargetModel(tcfg, seed=seed, init_std=0.6)
    gcfg = GlideConfig(target=tcfg, n_layers=draft_layers, draft_dim=16, n_heads=2, ffn_dim=32)
    draft = GlideDraft(gcfg, seed=seed + 1000, init_std=0.6)
    return target, draft


class TargetDrafter:
    """Drafts with the target itself, optionally shifting its argmax (adversarial)."""

    def __init__(self, target: TargetModel, shift: int = 0):
        self.target = target
        self.shift = shift

    def _dist(self):
        probs, _ = prefill(self.target, self.ctx)
        p = probs[-1].numpy()
        if self.shift:
            out = np.zeros_like(p)
            out[(int(np.argmax(p)) + self.shift) % p.size] = 1.0
            return out
        return p

    def begin_round(self, committed, target_cache):
        self.ctx = list(committed)
        return self._dist()

    def advance(self, token):
        self.ctx.append(int(token))
        return self._dist()


class ScriptedDrafter:
    """Distribution as a pure function of the full context."""

    def __init__(self, fn):
        self.fn = fn

    def begin_round(self, committed, target_cache):
        self.ctx = list(committed)
        return self.fn(self.ctx)

    def advance(self, token):
        self.ctx.append(int(token))
        return self.fn(self.ctx)


@pytest.fixture
def pair_factory():
    return random_pair

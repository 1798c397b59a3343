import numpy as np
import pytest
import torch

from glidespec.errors import CapacityError, CheckpointFormatError, ContractError
from glidespec.model import (
    DraftRunner,
    GlideConfig,
    GlideDraft,
    KVCache,
    TargetConfig,
    TargetModel,
    checkpoint_bytes,
    glide_forward,
    load_checkpoint,
    prefill,
    read_header,
    save_checkpoint,
    target_forward,
    truncate_cache,
)

TCFG = TargetConfig(n_layers=3, n_heads=2, head_dim=8, vocab_size=16, max_seq=40, ffn_dim=32)


@pytest.fixture(scope="module")
def target():
    return TargetModel(TCFG, seed=3, init_std=0.3)


def glide(n_layers=1, seed=5, **kw):
    cfg = GlideConfig(target=TCFG, n_layers=n_layers, draft_dim=16, n_heads=2, ffn_dim=32, **kw)
    return GlideDraft(cfg, seed=seed, init_std=0.3)


class TestTarget:
    def test_uniform_logits(self):
        t = TargetModel(TCFG, seed=0)
        with torch.no_grad():
            t.lm_head.weight.zero_()
        probs, _ = prefill(t, [1, 2, 3])
        np.testing.assert_allclose(probs.numpy(), 1 / 16, rtol=0, atol=1e-15)

    def test_incremental_matches_one_shot(self, target):
        full, _ = prefill(target, [4, 9, 2])
        _, cache = prefill(target, [4, 9])
        step = target_forward(target, [2], cache)
        assert torch.allclose(full[-1], step[-1], atol=1e-10, rtol=0)

    @pytest.mark.parametrize("split", [1, 3, 6])
    def test_any_split(self, target, split):
        seq = [3, 1, 4, 1, 5, 9, 2, 6]
        full, _ = prefill(target, seq)
        probs, cache = prefill(target, seq[:split])
        rest = target_forward(target, seq[split:], cache)
        assert torch.allclose(full[split:], rest, atol=1e-10, rtol=0)

    def test_cache_rows_after_prefill(self, target):
        _, cache = prefill(target, list(range(7)))
        for l in range(1, TCFG.n_layers + 1):
            k, v = cache.layer(l)
            assert k.shape == (TCFG.n_heads, 7, TCFG.head_dim) == v.shape

    def test_capacity(self, target):
        with pytest.raises(CapacityError):
            prefill(target, [0] * (TCFG.max_seq + 1))


class TestCache:
    def test_truncate(self, target):
        _, cache = prefill(target, list(range(10)))
        assert len(truncate_cache(cache, 7)) == 7

    def test_truncate_noop_bit_identical(self, target):
        _, cache = prefill(target, list(range(10)))
        before = [k.clone() for k in cache.keys]
        truncate_cache(cache, 10)
        assert all(torch.equal(a, b) for a, b in zip(before, cache.keys))

    def test_truncate_too_far(self, target):
        _, cache = prefill(target, list(range(4)))
        with pytest.raises(ContractError):
            truncate_cache(cache, 5)

    def test_replay_after_rejection(self, target):
        # verify [5, 7, 7] after prefix, reject the last two, then continue with 2
        _, cache = prefill(target, [1, 2, 3])
        target_forward(target, [5, 7, 7], cache)
        truncate_cache(cache, 4)
        replay = target_forward(target, [2], cache)
        clean, _ = prefill(target, [1, 2, 3, 5, 2])
        assert torch.allclose(replay[-1], clean[-1], atol=1e-10, rtol=0)

    def test_select_rows(self, target):
        _, cache = prefill(target, list(range(6)))
        k3 = cache.keys[0][:, 3].clone()
        cache.select([0, 1, 3])
        assert len(cache) == 3 and torch.equal(cache.keys[0][:, 2], k3)


class TestGlide:
    def test_layer_alignment_two_of_four(self):
        cfg = GlideConfig(target=TargetConfig(n_layers=4), n_layers=2)
        assert [cfg.source_layer(1), cfg.source_layer(2)] == [3, 4]

    @pytest.mark.parametrize("nt,nd", [(1, 1), (3, 1), (3, 2), (5, 3), (6, 6)])
    def test_layer_alignment_general(self, nt, nd):
        cfg = GlideConfig(target=TargetConfig(n_layers=nt), n_layers=nd)
        assert [cfg.source_layer(m) for m in range(1, nd + 1)] == list(range(nt - nd + 1, nt + 1))

    def test_draft_deeper_than_target_rejected(self):
        with pytest.raises(ContractError):
            GlideConfig(target=TargetConfig(n_layers=1), n_layers=2)

    def test_span_reads_aligned_target_layer(self, target):
        g = glide(n_layers=2)
        _, cache = prefill(target, [1, 2, 3, 4])
        spans = []
        glide_forward(g, [1, 2, 3, 4, 5, 6], cache, 5, span_log=spans)
        assert [(m, l) for m, l, _ in spans] == [(1, 2), (2, 3)]
        for _, _, allow in spans:
            # rows at positions >= 5 see target rows 1..4; earlier rows see nothing
            assert not allow[:4].any() and allow[4:].all() and allow.shape == (6, 4)

    def test_zero_output_projection_equals_no_cross_attention(self, target):
        g = glide()
        with torch.no_grad():
            for b in g.blocks:
                b.cross.wo.zero_()
        plain = GlideDraft(g.cfg.vanilla())
        plain.load_state_dict({k: v for k, v in g.state_dict().items() if ".cross" not in k})
        _, cache = prefill(target, [1, 2, 3])
        a = glide_forward(g, [1, 2, 3, 4, 5], cache, 4)
        b = glide_forward(plain, [1, 2, 3, 4, 5], cache, 4)
        assert torch.allclose(a, b, atol=1e-12, rtol=0)

    def test_empty_cache_is_bypass(self, target):
        g = glide()
        zeroed = glide()
        with torch.no_grad():
            for b in zeroed.blocks:
                b.cross.wo.zero_()
        empty = KVCache.for_target(TCFG)
        a = glide_forward(g, [7], empty, 1)
        b = glide_forward(zeroed, [7], empty, 1)
        assert torch.equal(a, b)

    def test_delayed_cache_precondition(self, target):
        _, cache = prefill(target, [1, 2, 3])
        with pytest.raises(ContractError):
            glide_forward(glide(), [1, 2, 3, 4], cache, 3)

    @pytest.mark.parametrize("n_layers", [1, 2])
    def test_runner_matches_stateless(self, target, n_layers):
        g = glide(n_layers=n_layers)
        committed = [3, 1, 4, 1, 5]
        _, cache = prefill(target, committed[:-1])
        full = glide_forward(g, committed + [9, 2], cache, len(committed)).numpy()
        r = DraftRunner(g)
        d0 = r.begin_round(committed, cache)
        d1 = r.advance(9)
        d2 = r.advance(2)
        np.testing.assert_allclose(np.stack([d0, d1, d2]), full[4:], atol=1e-10, rtol=0)
        # a second round reuses the prefix cache
        committed2 = committed + [9, 6]
        _, cache2 = prefill(target, committed2[:-1])
        full2 = glide_forward(g, committed2 + [8], cache2, len(committed2)).numpy()
        e0 = r.begin_round(committed2, cache2)
        e1 = r.advance(8)
        np.testing.assert_allclose(np.stack([e0, e1]), full2[-2:], atol=1e-10, rtol=0)


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path, target):
        for model in (target, glide(n_layers=2), glide(cross_attention=False)):
            p = save_checkpoint(model, tmp_path / "m.ckpt")
            again = load_checkpoint(p)
            assert checkpoint_bytes(again) == p.read_bytes()
            assert type(again) is type(model)

    def test_loaded_model_behaves_identically(self, tmp_path, target):
        g = glide()
        g2 = load_checkpoint(save_checkpoint(g, tmp_path / "g.ckpt"))
        _, cache = prefill(target, [1, 2])
        assert torch.equal(glide_forward(g, [1, 2, 3], cache, 3), glide_forward(g2, [1, 2, 3], cache, 3))

    def test_bad_magic(self, tmp_path, target):
        p = save_checkpoint(target, tmp_path / "t.ckpt")
        data = bytearray(p.read_bytes())
        data[0:4] = b"XXXX"
        p.write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(p)

    def test_bad_version(self, tmp_path, target):
        data = bytearray(checkpoint_bytes(target))
        data[8] = 9
        (tmp_path / "v.ckpt").write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "v.ckpt")

    def test_truncated(self, tmp_path, target):
        (tmp_path / "x.ckpt").write_bytes(checkpoint_bytes(target)[:-20])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_header_dims(self):
        tcfg = TargetConfig(n_layers=2, n_heads=4, head_dim=16, vocab_size=64)
        g = GlideDraft(GlideConfig(target=tcfg, n_layers=1, draft_dim=64, n_heads=4))
        hdr = read_header(checkpoint_bytes(g))
        assert (hdr["n_layers"], hdr["model_dim"], hdr["n_heads"], hdr["head_dim"],
                hdr["vocab_size"], hdr["block_length"]) == (1, 64, 4, 16, 64, 5)
        assert checkpoint_bytes(g)[:8] == b"GLIDECKP"

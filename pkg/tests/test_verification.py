import math

import numpy as np
import pytest

from conftest import TargetDrafter, random_pair
from glidespec.errors import CapacityError, ContractError
from glidespec.model import DraftRunner, prefill, target_forward
from glidespec.speculation import (
    ExpandedProposal,
    SpeculationConfig,
    expand,
    linearize,
    propose,
)
from glidespec.verification import (
    GREEDY,
    SAMPLING,
    cape_chunk_mask,
    decode_session,
    target_greedy_decode,
    verify_cape,
    verify_greedy,
    verify_sampling,
)


def peaked_rows(argmaxes, V=8):
    rows = np.full((len(argmaxes), V), 0.02)
    for r, a in enumerate(argmaxes):
        rows[r, a] = 1.0
    return rows / rows.sum(1, keepdims=True)


class TestGreedy:
    def test_full_acceptance(self):
        res = verify_greedy([3, 1, 4], peaked_rows([3, 1, 4, 6]), prev_len=10)
        assert res.accepted_len == 3 and res.bonus_token == 6
        assert res.commit_len == 14 and res.committed == [3, 1, 4, 6]

    def test_immediate_rejection(self):
        res = verify_greedy([3, 1], peaked_rows([5, 1, 2]), prev_len=4)
        assert res.accepted_len == 0 and res.committed == [5] and res.commit_len == 5
        assert res.keep_rows == [0]

    def test_partial(self):
        res = verify_greedy([3, 1, 4], peaked_rows([3, 2, 4, 6]))
        assert res.committed == [3, 2] and res.keep_rows == [0, 1]

    def test_row_count_contract(self):
        with pytest.raises(ContractError):
            verify_greedy([1, 2], peaked_rows([1, 2]))


class TestSampling:
    def test_identical_distributions_always_accept(self):
        rng = np.random.default_rng(0)
        dists = rng.dirichlet(np.ones(6), size=10_000)
        accepted = 0
        for d in dists:
            x = int(rng.choice(6, p=d))
            res = verify_sampling([x], d[None], np.stack([d, d]), rng)
            accepted += res.accepted_len
        assert accepted == 10_000

    def test_acceptance_ratio(self):
        rng = np.random.default_rng(1)
        pd = np.array([0.5, 0.5, 0.0, 0.0])
        pt = np.array([0.25, 0.25, 0.25, 0.25])
        n = 20_000
        acc = sum(verify_sampling([0], pd[None], np.stack([pt, pt]), rng).accepted_len for _ in range(n))
        assert abs(acc / n - 0.5) < 3 * math.sqrt(0.25 / n)

    def test_output_matches_target(self):
        rng = np.random.default_rng(2)
        pd = np.array([0.7, 0.1, 0.1, 0.1])
        pt = np.array([0.1, 0.2, 0.3, 0.4])
        n = 40_000
        counts = np.zeros(4)
        for _ in range(n):
            x = int(rng.choice(4, p=pd))
            counts[verify_sampling([x], pd[None], np.stack([pt, pt]), rng).committed[0]] += 1
        assert np.abs(counts / n - pt).max() < 4 * math.sqrt(0.25 / n)

    def test_zero_draft_mass_accepts(self):
        rng = np.random.default_rng(0)
        pd = np.array([0.0, 1.0])
        res = verify_sampling([0], pd[None], np.array([[0.5, 0.5], [0.5, 0.5]]), rng)
        assert res.accepted_len == 1


class TestCape:
    def lin(self):
        ep = ExpandedProposal([1, 2], [0.5, 0.5], [[3], [4]], [[0.2], [0.2]])
        return linearize(ep, SpeculationConfig(gamma=2))

    def test_degenerate_equals_greedy(self):
        ep = ExpandedProposal([3, 1, 4], [0.9] * 3, [[], [], []], [[], [], []])
        lin = linearize(ep, SpeculationConfig(gamma=3))
        for rows in ([3, 1, 4, 6], [3, 2, 4, 6], [0, 0, 0, 0]):
            a = verify_cape(lin, peaked_rows(rows))
            b = verify_greedy([3, 1, 4], peaked_rows(rows))
            assert (a.committed, a.keep_rows, a.commit_len) == (b.committed, b.keep_rows, b.commit_len)

    def test_substitution(self):
        lin = self.lin()
        assert lin.tokens == [1, 2, 3, 4]
        # row 0 prefers 3 over the proposed 1; row of linear index 3 continues with 7
        res = verify_cape(lin, peaked_rows([3, 0, 0, 7, 0]), prev_len=5)
        assert res.accepted_from_expansion == (1, 3)
        assert res.committed == [3, 7]
        assert res.keep_rows == [0, 3]
        assert res.commit_len == 7

    def test_substitution_at_second_position(self):
        res = verify_cape(self.lin(), peaked_rows([1, 4, 0, 0, 5]))
        assert res.accepted_from_expansion == (2, 4)
        assert res.committed == [1, 4, 5] and res.keep_rows == [0, 1, 4]

    def test_miss_outside_sets(self):
        res = verify_cape(self.lin(), peaked_rows([6, 0, 0, 0, 0]))
        assert res.committed == [6] and res.accepted_from_expansion is None

    def test_chunk_mask(self):
        m = cape_chunk_mask(self.lin())
        assert m[:, 0].all()
        assert m[1:, 1:].tolist() == self.lin().mask.allow.tolist()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_every_row_is_a_fresh_prefix_distribution(self, seed):
        target, draft = random_pair(seed, vocab=16)
        committed = [2, 9, 4, 4, 1]
        c = len(committed)
        _, cache = prefill(target, committed[:-1])
        cfg = SpeculationConfig(gamma=4, fixed_expansion=3)
        prop = propose(DraftRunner(draft), committed, cache, cfg)
        lin = linearize(expand(prop, cfg), cfg)
        positions = [c - 1] + [c - 1 + p for p in lin.posmap.positions]
        rows = target_forward(target, [committed[-1]] + lin.tokens, cache,
                              positions=positions, chunk_mask=cape_chunk_mask(lin)).numpy()
        for i in range(1, lin.beta + 1):
            p = lin.posmap.pos(i)
            ctx = committed + prop.tokens[: p - 1] + [lin.tokens[i - 1]]
            fresh = prefill(target, ctx)[0][-1].numpy()
            np.testing.assert_allclose(rows[i], fresh, atol=1e-10, rtol=0)


class TestSession:
    @pytest.mark.parametrize("cape", [False, True])
    def test_lossless_random(self, cape):
        for seed in range(4):
            target, draft = random_pair(seed, vocab=24)
            ref = target_greedy_decode(target, [1, 2, 3], 20)
            out = decode_session([1, 2, 3], draft, target, GREEDY, SpeculationConfig(gamma=4),
                                 max_new=20, cape=cape)
            assert out.generated == ref

    def test_perfect_mimic(self):
        target, _ = random_pair(7, vocab=16)
        out = decode_session([5], TargetDrafter(target), target, GREEDY,
                             SpeculationConfig(gamma=5), max_new=31)
        assert all(r["commit_count"] == 6 for r in out.trace)
        assert out.tokens_per_step == 6.0
        assert out.generated == target_greedy_decode(target, [5], 31)

    @pytest.mark.parametrize("cape", [False, True])
    def test_adversarial(self, cape):
        target, _ = random_pair(8, vocab=16)
        out = decode_session([5], TargetDrafter(target, shift=1), target, GREEDY,
                             SpeculationConfig(gamma=3, fixed_expansion=0 if cape else None),
                             max_new=12, cape=cape)
        assert all(r["commit_count"] == 1 for r in out.trace)
        assert out.generated == target_greedy_decode(target, [5], 12)

    def test_trace_bookkeeping(self):
        target, draft = random_pair(3, vocab=16)
        out = decode_session([4, 4], draft, target, GREEDY, SpeculationConfig(gamma=3),
                             max_new=15, cape=True)
        assert out.tokens_per_step == pytest.approx(
            sum(r["commit_count"] for r in out.trace) / out.rounds)
        # first token comes from the prefill
        assert 1 + sum(r["commit_count"] for r in out.trace) >= len(out.generated)
        for r in out.trace:
            assert r["beta"] == len(r["proposal_tokens"]) + sum(r["set_sizes"])
            assert r["commit_count"] == len(r["accepted_tokens"]) + 1

    def test_eos_stops(self):
        target, draft = random_pair(5, vocab=16)
        ref = target_greedy_decode(target, [1], 20)
        eos = ref[4]
        out = decode_session([1], draft, target, GREEDY, max_new=20, eos=eos)
        assert out.generated == ref[: ref.index(eos) + 1]

    def test_sampling_seeded(self):
        target, draft = random_pair(6, vocab=16)
        a = decode_session([1], draft, target, SAMPLING, max_new=10, seed=4)
        b = decode_session([1], draft, target, SAMPLING, max_new=10, seed=4)
        assert a.generated == b.generated and len(a.generated) == 10

    def test_cape_requires_greedy(self):
        target, draft = random_pair(0, vocab=8)
        with pytest.raises(ContractError):
            decode_session([1], draft, target, SAMPLING, cape=True)

    def test_capacity(self):
        target, draft = random_pair(0, vocab=8)
        with pytest.raises(CapacityError):
            decode_session([1] * 10, draft, target, max_new=60)

    def test_runs_to_max_seq(self):
        target, draft = random_pair(1, vocab=8)
        out = decode_session([1] * 4, draft, target, max_new=60, cape=True)
        assert out.generated == target_greedy_decode(target, [1] * 4, 60)

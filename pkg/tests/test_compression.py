import numpy as np
import pytest

from moeforge.clustering import GroupAssignment
from moeforge.compression import (
    GroupedParams,
    build_grouped_params,
    compressed_forward,
    compression_ratio,
    compute_base,
    effective_compression_ratio,
    factor_residual,
    group_storage,
    load_compressed,
    prune_residuals,
    rank_sweep,
    reconstruct,
    reconstruction_errors,
    regroup,
    save_compressed,
)
from moeforge.expert_bank import init_bank, init_planted_bank, relative_noise_sigma
from moeforge.numerics import FactorPair, NumericsError, OpCounter, frobenius_rel_error


def rng(seed=0):
    return np.random.default_rng(seed)


class TestComputeBase:
    def test_identical(self):
        m = rng().standard_normal((3, 4))
        assert np.array_equal(compute_base([m, m]), m)

    def test_antisymmetric_pair(self):
        m = rng().standard_normal((3, 4))
        assert np.array_equal(compute_base([m, -m]), np.zeros((3, 4)))

    def test_hand_mean(self):
        assert np.array_equal(compute_base([np.diag([1.0, 1.0]), np.diag([3.0, 1.0])]), np.diag([2.0, 1.0]))

    def test_empty(self):
        with pytest.raises(NumericsError):
            compute_base([])

    def test_shape_mismatch(self):
        with pytest.raises(NumericsError):
            compute_base([np.zeros((2, 2)), np.zeros((2, 3))])


class TestFactorResidual:
    def test_zero_residual(self):
        m = rng().standard_normal((6, 5))
        f = factor_residual(m, m, 2)
        assert np.max(np.abs(f.delta())) <= 1e-10

    def test_exact_low_rank_recovery(self):
        g = rng(1)
        base = g.standard_normal((10, 8))
        w = base + g.standard_normal((10, 3)) @ g.standard_normal((3, 8))
        f = factor_residual(w, base, 3)
        assert frobenius_rel_error(w, reconstruct(base, f)) <= 1e-9

    def test_sweep_nonincreasing(self):
        g = rng(2)
        base = g.standard_normal((64, 64))
        w = base + g.standard_normal((64, 64))
        errs = [frobenius_rel_error(w - base, factor_residual(w, base, r).delta()) for r in (4, 8, 16, 32)]
        assert all(b <= a for a, b in zip(errs, errs[1:]))
        assert errs[0] > errs[-1]

    def test_random_mode_seeded(self):
        base = np.zeros((6, 4))
        f1 = factor_residual(np.ones((6, 4)), base, 2, mode="random", seed=5)
        f2 = factor_residual(np.ones((6, 4)), base, 2, mode="random", seed=5)
        assert np.array_equal(f1.a, f2.a) and np.array_equal(f1.b, f2.b)
        assert f1.a.shape == (6, 2) and f1.b.shape == (4, 2)
        big = factor_residual(np.ones((400, 400)), np.zeros((400, 400)), 100, mode="random", seed=0)
        assert np.std(big.a) == pytest.approx(0.1, rel=0.02)

    def test_errors(self):
        with pytest.raises(NumericsError):
            factor_residual(np.ones((3, 3)), np.ones((3, 2)), 1)
        with pytest.raises(NumericsError):
            factor_residual(np.ones((3, 3)), np.zeros((3, 3)), 4)
        with pytest.raises(NumericsError):
            factor_residual(np.ones((3, 3)), np.zeros((3, 3)), 1, mode="qr")


class TestReconstruct:
    def test_zero_factors(self):
        base = rng().standard_normal((4, 3))
        f = FactorPair(np.zeros((4, 1)), np.zeros((3, 1)))
        assert np.array_equal(reconstruct(base, f), base)

    def test_zero_base(self):
        g = rng(3)
        f = FactorPair(g.standard_normal((4, 2)), g.standard_normal((3, 2)))
        assert np.array_equal(reconstruct(np.zeros((4, 3)), f), f.a @ f.b.T)

    def test_full_rank_round_trip(self):
        g = rng(4)
        w, base = g.standard_normal((7, 5)), g.standard_normal((7, 5))
        assert np.max(np.abs(reconstruct(base, factor_residual(w, base, 5)) - w)) <= 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(NumericsError):
            reconstruct(np.zeros((4, 4)), FactorPair(np.zeros((4, 1)), np.zeros((3, 1))))


def grouped(e=8, g=2, d_in=12, d_out=10, r=3, seed=0):
    bank = init_bank(e, d_in, d_out, seed)
    return bank, build_grouped_params(bank, GroupAssignment.contiguous(e, g), r)


class TestGroupedParams:
    def test_base_is_member_mean(self):
        bank, gp = grouped()
        for gi, grp in enumerate(gp.assignment.groups):
            assert np.allclose(gp.bases[gi], np.mean([bank.experts[i] for i in grp], axis=0), atol=0)

    def test_every_expert_has_rank_r(self):
        _, gp = grouped(r=3)
        assert all(f.rank == 3 for f in gp.residuals)

    def test_wrong_count(self):
        _, gp = grouped()
        with pytest.raises(NumericsError):
            GroupedParams(gp.assignment, gp.bases[:1], gp.residuals, gp.r)

    @pytest.mark.parametrize("seed", range(20))
    def test_stored_elements_equal_formula(self, seed):
        g_ = rng(100 + seed)
        k = int(g_.integers(1, 6))
        groups = int(g_.integers(1, 4))
        d_in, d_out = int(g_.integers(2, 12)), int(g_.integers(2, 12))
        r = int(g_.integers(1, min(d_in, d_out) + 1))
        bank = [g_.standard_normal((d_out, d_in)) for _ in range(k * groups)]
        gp = build_grouped_params(bank, GroupAssignment.contiguous(k * groups, groups), r)
        assert gp.stored_elements() == groups * group_storage(k, d_in, d_out, r)
        assert group_storage(k, d_in, d_out, r) == d_in * d_out + k * r * (d_in + d_out)

    def test_regroup_preserves_effective_weights_at_full_rank(self):
        bank, gp = grouped(e=4, g=2, d_in=5, d_out=5, r=5)
        new = regroup(gp, GroupAssignment([[0, 2], [1, 3]], [0, 1]))
        for i in range(4):
            assert np.allclose(new.expert_weight(i), bank.experts[i], atol=1e-9)
        assert np.allclose(new.bases[0], (bank.experts[0] + bank.experts[2]) / 2, atol=1e-12)


class TestCompressedForward:
    def test_equivalence_to_dense(self):
        bank, gp = grouped(seed=7)
        x = rng(8).standard_normal(12)
        for gi, grp in enumerate(gp.assignment.groups):
            out = compressed_forward(gp, gi, x, grp)
            for i in grp:
                assert np.max(np.abs(out[i] - reconstruct(gp.bases[gi], gp.residuals[i]) @ x)) <= 1e-10

    def test_random_inputs_equivalence(self):
        _, gp = grouped(seed=9)
        g_ = rng(10)
        for _ in range(20):
            x = g_.standard_normal(12)
            out = compressed_forward(gp, 1, x, gp.assignment.groups[1])
            for i, y in out.items():
                assert np.max(np.abs(y - gp.expert_weight(i) @ x)) <= 1e-9

    def test_pruned_returns_base_output(self):
        _, gp = grouped()
        gp.residuals[0] = None
        gp.pruned_mask[0] = True
        x = rng().standard_normal(12)
        out = compressed_forward(gp, 0, x, [0, 1])
        assert np.array_equal(out[0], gp.bases[0] @ x)

    def test_multiply_counter(self):
        bank = init_bank(8, 64, 64, 0)
        gp = build_grouped_params(bank, GroupAssignment.contiguous(8, 1), 16)
        c = OpCounter()
        compressed_forward(gp, 0, np.ones(64), range(8), counter=c)
        assert c.mults == 64 * 64 + 8 * 16 * 128

    def test_not_in_group(self):
        _, gp = grouped()
        with pytest.raises(NumericsError):
            compressed_forward(gp, 0, np.ones(12), [5])

    def test_bad_input_length(self):
        _, gp = grouped()
        with pytest.raises(NumericsError):
            compressed_forward(gp, 0, np.ones(11), [0])


class TestCompressionRatio:
    def test_large_layer(self):
        assert compression_ratio(8, 4096, 4096, 16) == pytest.approx(8 / 1.0625, abs=1e-12)
        assert f"{compression_ratio(8, 4096, 4096, 16):.3f}" == "7.529"

    def test_desk_layer(self):
        assert compression_ratio(8, 64, 64, 16) == pytest.approx(1.6, abs=1e-12)

    def test_single_expert_can_expand(self):
        assert compression_ratio(1, 8, 8, 4) < 1.0

    def test_invalid(self):
        with pytest.raises(NumericsError):
            compression_ratio(0, 8, 8, 1)

    def test_effective_is_lower(self):
        assert effective_compression_ratio(32, 4, 64, 64, 4) < compression_ratio(8, 64, 64, 4)


class TestPrune:
    def setup_gp(self, residual):
        base = np.arange(1.0, 7.0).reshape(2, 3)
        a = GroupAssignment([[0, 1]], [0])
        u, s, vt = np.linalg.svd(residual)
        f = FactorPair(u[:, :1] * s[0], vt[0][:, None])
        other = FactorPair(np.ones((2, 1)), np.ones((3, 1)))
        return GroupedParams(a, [base], [f, other], 1), base

    def test_aligned_never_pruned(self):
        base = np.arange(1.0, 7.0).reshape(2, 3)
        gp, _ = self.setup_gp(0.5 * base)
        gp.bases[0] = np.outer([1.0, 2.0], [1.0, 1.0, 1.0])
        gp.residuals[0] = FactorPair(np.array([[1.0], [2.0]]) * 0.5, np.ones((3, 1)))
        mask = prune_residuals(gp, 0.05)
        assert not mask[0]

    def test_orthogonal_pruned(self):
        base = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        gp, _ = self.setup_gp(np.zeros((2, 3)) + np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]))
        gp.bases[0] = base
        mask = prune_residuals(gp, 0.05)
        assert mask[0] and gp.residuals[0] is None

    def test_gamma_zero_prunes_nothing(self):
        base = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        gp, _ = self.setup_gp(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]))
        gp.bases[0] = base
        assert not prune_residuals(gp, 0.0).any()

    def test_zero_base_skipped(self):
        gp, _ = self.setup_gp(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]))
        gp.bases[0] = np.zeros((2, 3))
        assert not prune_residuals(gp, 1.0).any()

    def test_gamma_range(self):
        _, gp = grouped()
        with pytest.raises(NumericsError):
            prune_residuals(gp, 1.5)

    def test_pruned_storage_shrinks(self):
        _, gp = grouped()
        before = gp.stored_elements()
        gp.residuals[0] = None
        gp.pruned_mask[0] = True
        assert gp.stored_elements() == before - 3 * (12 + 10)


class TestRankSweep:
    def test_monotone_and_cr(self):
        bank = init_bank(4, 64, 64, 0)
        rows = rank_sweep(bank, GroupAssignment.contiguous(4, 1), (4, 8, 16, 32))
        errs = [row["mean_rel_error"] for row in rows]
        assert [row["r"] for row in rows] == [4, 8, 16, 32]
        assert all(b <= a for a, b in zip(errs, errs[1:]))
        assert rows[2]["cr"] == compression_ratio(4, 64, 64, 16)

    def test_matches_direct_factorization(self):
        bank = init_bank(4, 10, 10, 1)
        a = GroupAssignment.contiguous(4, 2)
        rows = rank_sweep(bank, a, (3,))
        direct = reconstruction_errors(bank, build_grouped_params(bank, a, 3))
        assert rows[0]["mean_rel_error"] == pytest.approx(float(np.mean(direct)), abs=1e-9)

    def test_invalid(self):
        with pytest.raises(NumericsError):
            rank_sweep(init_bank(2, 4, 4, 0), GroupAssignment.contiguous(2, 1), (5,))

    def test_planted_rank16_below_threshold(self):
        bank, _ = init_planted_bank(2, 3, 64, 64, relative_noise_sigma(0.3, 64), 0, residual_rank=16)
        gp = build_grouped_params(bank, GroupAssignment.contiguous(6, 2), 16)
        assert np.max(reconstruction_errors(bank, gp)) < 0.015


class TestArchive:
    def test_fp64_round_trip(self, tmp_path):
        _, gp = grouped()
        gp.residuals[3] = None
        gp.pruned_mask[3] = True
        arc = save_compressed(gp, tmp_path / "m.moec")
        back = load_compressed(tmp_path / "m.moec")
        assert back.params.assignment.groups == gp.assignment.groups
        assert back.params.pruned_mask.tolist() == gp.pruned_mask.tolist()
        for i, f in enumerate(gp.residuals):
            if f is None:
                assert back.params.residuals[i] is None
            else:
                assert np.array_equal(back.params.residuals[i].a, f.a)
                assert np.array_equal(back.params.residuals[i].b, f.b)
        for b0, b1 in zip(gp.bases, back.params.bases):
            assert np.max(np.abs(b1 - b0) / np.maximum(np.abs(b0), 1e-3)) <= 2.0**-10
        assert arc.blocks is None

    def test_int4_payload_bit_exact(self, tmp_path):
        _, gp = grouped(seed=3)
        arc = save_compressed(gp, tmp_path / "q.moec", int4=True)
        back = load_compressed(tmp_path / "q.moec")
        assert [b.to_bytes() for b in back.blocks] == [b.to_bytes() for b in arc.blocks]
        save_compressed(back.params, tmp_path / "q2.moec", int4=True)
        assert (tmp_path / "q.moec").read_bytes() == (tmp_path / "q2.moec").read_bytes()

    def test_int4_error_bounded(self, tmp_path):
        _, gp = grouped(seed=4)
        arc = save_compressed(gp, tmp_path / "q.moec", int4=True)
        for gi, grp in enumerate(gp.assignment.groups):
            scale = arc.blocks[gi].scale
            for i in grp:
                assert np.max(np.abs(arc.params.residuals[i].a - gp.residuals[i].a)) <= scale / 2 + 1e-15
                assert np.max(np.abs(arc.params.residuals[i].b - gp.residuals[i].b)) <= scale / 2 + 1e-15

    def test_bad_magic(self, tmp_path):
        _, gp = grouped()
        p = tmp_path / "m.moec"
        save_compressed(gp, p)
        p.write_bytes(b"XXXX" + p.read_bytes()[4:])
        with pytest.raises(NumericsError):
            load_compressed(p)

    def test_trailing_bytes(self, tmp_path):
        _, gp = grouped()
        p = tmp_path / "m.moec"
        save_compressed(gp, p)
        p.write_bytes(p.read_bytes() + b"\0")
        with pytest.raises(NumericsError):
            load_compressed(p)

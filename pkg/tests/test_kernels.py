import math

import numpy as np
import pytest

from momentconv import geometry as geo
from momentconv import kernels as mk


class TestSignatures:
    def test_counts_ranks_0_to_4(self):
        assert [len(mk.enumerate_signatures(r)) for r in range(5)] == [1, 1, 2, 4, 10]

    def test_rank3_exact_set(self):
        sigs = mk.enumerate_signatures(3)
        assert [s.pairs for s in sigs] == [(), ((1, 2),), ((1, 3),), ((2, 3),)]

    def test_rank0_only_empty(self):
        sigs = mk.enumerate_signatures(0)
        assert len(sigs) == 1 and sigs[0].pairs == ()

    def test_rank2_two_forms(self):
        sigs = mk.enumerate_signatures(2)
        assert [s.pairs for s in sigs] == [(), ((1, 2),)]

    def test_matches_recurrence(self):
        for r in range(9):
            assert len(mk.enumerate_signatures(r)) == mk.signature_count(r)

    def test_deterministic_and_disjoint(self):
        sigs = mk.enumerate_signatures(4)
        assert sigs == mk.enumerate_signatures(4)
        for s in sigs:
            flat = [i for p in s.pairs for i in p]
            assert len(flat) == len(set(flat))

    def test_rejects_overlapping_pairs(self):
        with pytest.raises(ValueError):
            mk.Signature(4, ((1, 2), (2, 3)))


class TestInterpolation:
    def test_constant_profile_everywhere_one(self):
        interp = mk.build_interpolation(3, 3, 2)
        vals = interp.weights @ np.ones(3)
        assert np.allclose(vals, 1.0)

    def test_tent_profile_corner_value(self):
        interp = mk.build_interpolation(3, 3, 2)
        vals = (interp.weights @ np.array([0.0, 1.0, 0.0])).reshape(3, 3)
        assert vals[1, 1] == 0.0
        assert vals[0, 1] == vals[1, 0] == vals[1, 2] == vals[2, 1] == 1.0
        corner = 2.0 - math.sqrt(2.0)
        assert np.allclose([vals[0, 0], vals[0, 2], vals[2, 0], vals[2, 2]], corner)

    def test_rows_sum_to_one_with_at_most_two_nonzeros(self):
        interp = mk.build_interpolation(5, 5, 3)
        assert np.allclose(interp.weights.sum(axis=1), 1.0)
        assert (np.count_nonzero(interp.weights, axis=1) <= 2).all()

    def test_extrapolation_guard(self):
        # 3d corner radius sqrt(3) = 1.732 needs 3 samples
        mk.build_interpolation(3, 3, 3)
        with pytest.raises(mk.InsufficientSamplesError):
            mk.build_interpolation(3, 2, 3)

    def test_even_support_rejected(self):
        with pytest.raises(ValueError):
            mk.build_interpolation(4, 4, 2)


def assemble(rank, pairs, samples, support=3, d=2):
    kern = mk.MomentKernel(rank, mk.Signature(rank, pairs), mk.RadialProfile(np.asarray(samples)), support)
    return mk.assemble_moment_kernel(kern, d)


class TestAssembleMomentKernel:
    def test_rank1_zero_at_origin(self):
        arr = assemble(1, (), [1.0, 1.0, 1.0])
        assert np.allclose(arr[1, 1], 0.0)

    def test_rank2_paired_is_radial_times_identity(self):
        arr = assemble(2, ((1, 2),), [1.0, 1.0, 1.0])
        for i in range(3):
            for j in range(3):
                assert np.allclose(arr[i, j], np.eye(2))

    def test_rank2_empty_signature_outer_product(self):
        arr = assemble(2, (), [1.0, 1.0, 1.0])
        # offset x = (1, 0) lives at grid index (2, 1); x x^T = [[1,0],[0,0]]
        assert np.allclose(arr[2, 1], np.array([[1.0, 0.0], [0.0, 0.0]]))

    def test_linearity_in_profile(self):
        rng = np.random.default_rng(0)
        p = rng.standard_normal(3)
        a = assemble(2, (), p)
        b = assemble(2, (), 2.5 * p)
        assert np.allclose(b, 2.5 * a, atol=1e-14)

    def test_parity(self):
        rng = np.random.default_rng(1)
        for rank in range(5):
            for sig in mk.enumerate_signatures(rank):
                arr = assemble(rank, sig.pairs, rng.standard_normal(3))
                flipped = arr[::-1, ::-1]  # x -> -x on the grid
                expect = arr if rank % 2 == 0 else -arr
                assert np.allclose(flipped, expect, atol=1e-14), f"parity broke for {sig}"


class TestExactEquivariance:
    @pytest.mark.parametrize("d", [2, 3])
    def test_all_signatures_all_group_elements(self, d):
        rng = np.random.default_rng(42)
        group = geo.enumerate_hyperoctahedral(d)
        n = 3 if d == 2 else 3
        for rank in range(5):
            for sig in mk.enumerate_signatures(rank):
                arr = assemble(rank, sig.pairs, rng.standard_normal(n), support=3, d=d)
                field = geo.TensorField(geo.GridShape((3,) * d), rank, arr)
                for R in group:
                    moved = geo.act_on_field(R, field)
                    dev = np.max(np.abs(moved.data - arr))
                    assert dev <= 1e-12, f"d={d} {sig} element deviation {dev}"


class TestBlockKernel:
    def test_scalar_to_scalar_single_profile_isotropic(self):
        spec = mk.ChannelSpec.of(scalars=1)
        kern = mk.build_block_kernel(spec, spec, {(0, 0, 0): mk.RadialProfile([1.0, 2.0, 3.0])}, 3, 2)
        assert kern.weights.shape == (3, 3, 1, 1)
        w = kern.weights[..., 0, 0]
        # isotropic: equal values at equal radius
        assert w[0, 1] == w[1, 0] == w[1, 2] == w[2, 1]
        assert w[0, 0] == w[0, 2] == w[2, 0] == w[2, 2]

    def test_vector_to_vector_needs_two_profiles(self):
        spec = mk.ChannelSpec.of(vectors=1)
        kmap = mk.BlockKernelMap(spec, spec, d=2, support=3, n_samples=3)
        assert kmap.n_triples == 2
        params = {(0, 0, 0): mk.RadialProfile([1.0, 1.0, 1.0]),
                  (0, 0, 1): mk.RadialProfile([0.0, 1.0, 2.0])}
        kern = mk.build_block_kernel(spec, spec, params, 3, 2)
        assert kern.weights.shape == (3, 3, 2, 2)

    def test_scalar_to_matrix_two_profiles_and_rows(self):
        in_spec = mk.ChannelSpec.of(scalars=1)
        out_spec = mk.ChannelSpec.of(matrices=1)
        kmap = mk.BlockKernelMap(in_spec, out_spec, d=2, support=3, n_samples=3)
        assert kmap.n_triples == len(mk.enumerate_signatures(2)) == 2
        assert kmap.out_width == 4

    def test_missing_and_extra_profiles_rejected(self):
        spec = mk.ChannelSpec.of(vectors=1)
        with pytest.raises(mk.ParameterShapeError):
            mk.build_block_kernel(spec, spec, {(0, 0, 0): mk.RadialProfile([1.0, 1.0, 1.0])}, 3, 2)
        params = {(0, 0, 0): mk.RadialProfile([1.0, 1.0, 1.0]),
                  (0, 0, 1): mk.RadialProfile([1.0, 1.0, 1.0]),
                  (0, 0, 2): mk.RadialProfile([1.0, 1.0, 1.0])}
        with pytest.raises(mk.ParameterShapeError):
            mk.build_block_kernel(spec, spec, params, 3, 2)

    def test_block_kernel_blocks_lie_in_moment_span(self):
        # assemble a random full block kernel and check every block satisfies
        # the transformation law (the span membership test comes via verify)
        rng = np.random.default_rng(7)
        in_spec = mk.ChannelSpec.of(scalars=1, vectors=1, matrices=1)
        out_spec = mk.ChannelSpec.of(scalars=1, vectors=1, matrices=1)
        kmap = mk.BlockKernelMap(in_spec, out_spec, d=2, support=3, n_samples=3)
        K = kmap.assemble(rng.standard_normal((kmap.n_triples, 3)))
        group = geo.enumerate_hyperoctahedral(2)
        for ro, ocol, ospan in out_spec.channels(2):
            for ri, icol, ispan in in_spec.channels(2):
                block = K[:, ocol:ocol + ospan, icol:icol + ispan]
                rank = ro + ri
                arr = block.reshape((3, 3) + (2,) * rank)
                field = geo.TensorField(geo.GridShape((3, 3)), rank, arr)
                for R in group:
                    moved = geo.act_on_field(R, field)
                    assert np.max(np.abs(moved.data - arr)) <= 1e-12

    def test_assembly_map_transpose_consistency(self):
        # <assemble(p), G> == <p, backprop(G)> for the linear map and its adjoint
        rng = np.random.default_rng(8)
        in_spec = mk.ChannelSpec.of(scalars=2, vectors=1)
        out_spec = mk.ChannelSpec.of(scalars=1, vectors=1, matrices=1)
        kmap = mk.BlockKernelMap(in_spec, out_spec, d=2, support=3, n_samples=3)
        p = rng.standard_normal((kmap.n_triples, 3))
        G = rng.standard_normal((9, kmap.out_width, kmap.in_width))
        lhs = float(np.sum(kmap.assemble(p) * G))
        rhs = float(np.sum(p * kmap.backprop(G)))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


class TestParamCount:
    def test_scalar_scalar(self):
        s = mk.ChannelSpec.of(scalars=1)
        assert mk.param_count(s, s, 3, 3, 2) == 3

    def test_vector_vector(self):
        v = mk.ChannelSpec.of(vectors=1)
        assert mk.param_count(v, v, 3, 3, 2) == 6

    def test_full_layer_brute_force(self):
        spec = mk.ChannelSpec.of(scalars=4, vectors=4, matrices=4)
        expected = 0
        for ro in spec.ranks():
            for ri in spec.ranks():
                expected += len(mk.enumerate_signatures(ro + ri)) * 3
        assert mk.param_count(spec, spec, 3, 3, 2) == expected
        kmap = mk.BlockKernelMap(spec, spec, d=2, support=3, n_samples=3)
        assert kmap.n_triples * 3 == expected

    def test_bias_accounting(self):
        spec = mk.ChannelSpec.of(scalars=2, vectors=3, matrices=1)
        base = mk.param_count(spec, spec, 3, 3, 2)
        assert mk.param_count(spec, spec, 3, 3, 2, include_bias=True) == base + 2 + 1

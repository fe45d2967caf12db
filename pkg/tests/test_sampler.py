"""Frame-selection contract: temporal embedding, blocks, Gumbel sampling,
straight-through discretization, and the baseline samplers."""

import numpy as np
import pytest

from glimpse import tensor as T
from glimpse.data import FrameBundle
from glimpse.gradcheck import grad_check
from glimpse.nn import widen_weights
from glimpse.sampler import (
    FsBlock,
    SamplerParams,
    add_temporal_embedding,
    apply_mask,
    fs_block,
    gumbel_noise,
    gumbel_softmax,
    selection_logits,
    soft_select,
    sparse_sample,
    straight_through_mask,
    uniform_indices,
    uniform_select,
)
from glimpse.tensor import Tensor


def make_bundle(rng, n=6, p=4, d=16):
    return FrameBundle(v_patch=rng.normal(size=(n, p, d)), v_cls=rng.normal(size=(n, d)))


def make_sampler(rng_seed=0, d=16, h=2, n=6, k=2, depth=1, tau=1.0):
    return SamplerParams(d, h, n, k, depth, np.random.default_rng(rng_seed), tau_g=tau)


class TestTemporalEmbedding:
    def test_zero_table_is_identity(self):
        rng = np.random.default_rng(0)
        seq = rng.normal(size=(5, 8))
        out = add_temporal_embedding(Tensor(seq), Tensor(np.zeros((10, 8))))
        np.testing.assert_array_equal(out.data, seq)

    def test_zero_input_returns_table_prefix(self):
        rng = np.random.default_rng(1)
        table = rng.normal(size=(10, 8))
        out = add_temporal_embedding(Tensor(np.zeros((4, 8))), Tensor(table))
        np.testing.assert_array_equal(out.data, table[:4])

    def test_table_too_small_rejected(self):
        with pytest.raises(ValueError, match="temporal table too small"):
            add_temporal_embedding(Tensor(np.zeros((5, 8))), Tensor(np.zeros((3, 8))))

    def test_gradient_reaches_input_and_table(self):
        rng = np.random.default_rng(2)
        seq = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        table = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 6)))
        report = grad_check(
            lambda: T.tsum(add_temporal_embedding(seq, table) * w), [seq, table]
        )
        assert report.passed, report.summary()


class TestFsBlock:
    def test_zero_output_projections_make_identity(self):
        rng = np.random.default_rng(3)
        block = FsBlock(8, 2, rng)
        block.gate.w_o.w = Tensor(np.zeros((8, 8)), requires_grad=True)
        block.attn.w_o.w = Tensor(np.zeros((8, 8)), requires_grad=True)
        block.mlp.fc2.w = Tensor(np.zeros((32, 8)), requires_grad=True)
        block.mlp.fc2.b = Tensor(np.zeros(8), requires_grad=True)
        seq = rng.normal(size=(5, 8))
        out = fs_block(Tensor(seq), Tensor(rng.normal(size=8)), block)
        np.testing.assert_array_equal(out.data, seq)

    def test_gradients_pass_oracle(self):
        rng = np.random.default_rng(4)
        block = FsBlock(8, 2, np.random.default_rng(4))
        widen_weights(block, rng)
        seq = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        t_cls = Tensor(rng.normal(size=8), requires_grad=True)
        report = grad_check(
            lambda: T.tmean(fs_block(seq, t_cls, block)),
            [seq, t_cls] + block.parameters(),
        )
        assert report.passed, report.summary()

    def test_stacks_compose(self):
        rng = np.random.default_rng(5)
        params = make_sampler(depth=3)
        assert len(params.blocks) == 3
        out = selection_logits(Tensor(rng.normal(size=(6, 16))),
                               Tensor(rng.normal(size=16)), params)
        assert out.shape == (2, 6)


class TestGumbelSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(4, 9)) * 3)
        y = gumbel_softmax(x, 1.0, rng_seed=0)
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-10)
        assert ((y.data > 0) & (y.data < 1)).all()

    def test_zero_temperature_limit_is_onehot_at_perturbed_argmax(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=6)
        noise = gumbel_noise(x.shape, rng_seed=11)
        expected = np.argmax(x + noise)
        y = gumbel_softmax(Tensor(x), 1e-4, rng_seed=11)
        assert np.argmax(y.data) == expected
        assert y.data[expected] == pytest.approx(1.0, abs=1e-12)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError, match="nonpositive temperature"):
            gumbel_softmax(Tensor([1.0, 2.0]), 0.0, rng_seed=0)

    def test_same_seed_same_draw(self):
        x = Tensor(np.array([0.3, -0.2, 1.1]))
        a = gumbel_softmax(x, 1.0, rng_seed=42).data
        b = gumbel_softmax(x, 1.0, rng_seed=42).data
        assert (a == b).all()

    def test_gumbel_max_frequencies_match_softmax(self):
        # Selection frequencies of argmax(x + g) follow softmax(x); 30k draws
        # here, the acceptance suite runs the full 100k version.
        x = np.log(np.array([1.0, 2.0, 7.0]))
        draws = 30_000
        noise = gumbel_noise((draws, 3), rng_seed=5)
        counts = np.bincount(np.argmax(x + noise, axis=1), minlength=3) / draws
        np.testing.assert_allclose(counts, [0.1, 0.2, 0.7], atol=0.015)


class TestStraightThrough:
    def test_hard_rows_are_argmax_onehots(self):
        y = Tensor(np.array([[0.1, 0.7, 0.2], [0.5, 0.2, 0.3]]))
        mask = straight_through_mask(y)
        np.testing.assert_array_equal(mask.hard.data, [[0, 1, 0], [1, 0, 0]])
        np.testing.assert_array_equal(mask.indices, [1, 0])

    def test_forward_equals_hard_bitwise(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            y = T.softmax_stable(Tensor(rng.normal(size=(3, 7)) * 2, requires_grad=True))
            mask = straight_through_mask(y)
            assert (mask.straight_through.data == mask.hard.data).all()

    def test_ties_break_to_lowest_index(self):
        y = Tensor(np.array([[0.4, 0.4, 0.2]]))
        assert straight_through_mask(y).indices[0] == 0

    def test_backward_identical_to_soft_path(self):
        # Against a linear readout the gradient reaching the logits must be
        # bit-identical whether the readout consumes the straight-through mask
        # or the soft distribution itself.
        rng = np.random.default_rng(9)
        weights = Tensor(rng.normal(size=(2, 5)))
        logits_data = rng.normal(size=(2, 5))

        def grad_through(use_hard):
            logits = Tensor(logits_data, requires_grad=True)
            y = T.softmax_stable(logits)
            branch = straight_through_mask(y).straight_through if use_hard else y
            T.tsum(branch * weights).backward()
            return logits.grad

        assert (grad_through(True) == grad_through(False)).all()


class TestSparseSample:
    def test_forward_frames_are_exact_copies(self):
        rng = np.random.default_rng(10)
        bundle = make_bundle(rng)
        params = make_sampler()
        selected, mask = sparse_sample(bundle, Tensor(rng.normal(size=16)), params, rng_seed=3)
        assert selected.shape == (2, 4, 16)
        for row, frame in enumerate(mask.indices):
            assert (selected.data[row] == bundle.v_patch[frame]).all()

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(11)
        bundle = make_bundle(rng)
        t = Tensor(rng.normal(size=16))
        params = make_sampler()
        _, m1 = sparse_sample(bundle, t, params, rng_seed=7)
        _, m2 = sparse_sample(bundle, t, params, rng_seed=7)
        assert (m1.indices == m2.indices).all()
        assert (m1.soft.data == m2.soft.data).all()

    def test_frame_count_mismatch_rejected(self):
        rng = np.random.default_rng(12)
        bundle = make_bundle(rng, n=5)
        params = make_sampler(n=6)
        with pytest.raises(ValueError, match="frames"):
            sparse_sample(bundle, Tensor(rng.normal(size=16)), params, rng_seed=0)

    def test_permutation_mask_permutes_frames(self):
        rng = np.random.default_rng(13)
        bundle = make_bundle(rng, n=4)
        perm = np.array([2, 0, 3, 1])
        rows = np.zeros((4, 4))
        rows[np.arange(4), perm] = 1.0
        out = apply_mask(Tensor(rows), bundle)
        np.testing.assert_array_equal(out.data, bundle.v_patch[perm])

    def test_selection_gradient_reaches_sampler_parameters(self):
        rng = np.random.default_rng(14)
        bundle = make_bundle(rng)
        params = make_sampler()
        selected, _ = sparse_sample(bundle, Tensor(rng.normal(size=16)), params, rng_seed=1)
        T.tsum(selected * Tensor(rng.normal(size=selected.shape))).backward()
        assert params.w_s.w.grad is not None
        assert np.abs(params.w_s.w.grad).max() > 0
        assert params.temporal_table.grad is not None
        assert np.abs(params.temporal_table.grad).max() > 0


class TestSoftSelect:
    def test_uniform_soft_row_averages_frames(self):
        rng = np.random.default_rng(15)
        bundle = make_bundle(rng, n=5)
        rows = np.full((2, 5), 1.0 / 5.0)
        out = apply_mask(Tensor(rows), bundle)
        np.testing.assert_allclose(out.data[0], bundle.v_patch.mean(axis=0), atol=1e-12)

    def test_onehot_soft_row_equals_hard_copy(self):
        rng = np.random.default_rng(16)
        bundle = make_bundle(rng, n=5)
        rows = np.zeros((1, 5))
        rows[0, 3] = 1.0
        out = apply_mask(Tensor(rows), bundle)
        np.testing.assert_array_equal(out.data[0], bundle.v_patch[3])

    def test_gradcheck_through_soft_pipeline(self):
        rng = np.random.default_rng(17)
        bundle = make_bundle(rng, n=4, p=2, d=8)
        params = make_sampler(d=8, n=4, k=2)
        t = Tensor(rng.normal(size=8), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 2, 8)))
        checked = [t, params.w_s.w, params.temporal_table]
        report = grad_check(
            lambda: T.tsum(soft_select(bundle, t, params, rng_seed=5) * w), checked
        )
        assert report.passed, report.summary()


class TestUniformSelect:
    def test_reference_grid(self):
        expected = [0, 7, 13, 20, 26, 33, 40, 46, 53, 59, 66, 73, 79, 86, 92, 99]
        np.testing.assert_array_equal(uniform_indices(100, 16), expected)

    def test_identity_when_k_equals_n(self):
        np.testing.assert_array_equal(uniform_indices(5, 5), [0, 1, 2, 3, 4])

    def test_endpoints(self):
        np.testing.assert_array_equal(uniform_indices(4, 2), [0, 3])

    def test_single_pick_is_center(self):
        np.testing.assert_array_equal(uniform_indices(9, 1), [4])

    def test_mask_has_no_gradient_path(self):
        mask = uniform_select(6, 3)
        assert mask.hard.requires_grad is False
        assert mask.straight_through.requires_grad is False
        np.testing.assert_array_equal(mask.soft.data, mask.hard.data)
        assert mask.hard.data.sum(axis=1).tolist() == [1.0, 1.0, 1.0]

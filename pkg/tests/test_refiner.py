"""Refinement stack: assembly, divided attention topology, and CLS extraction."""

import numpy as np
import pytest

from glimpse import tensor as T
from glimpse.gating import gate_core
from glimpse.gradcheck import grad_check
from glimpse.nn import widen_weights
from glimpse.refiner import (
    RefinerParams,
    VrBlock,
    assemble_refiner_input,
    refine,
    vr_block,
)
from glimpse.tensor import Tensor


def make_refiner(seed=0, d=16, h=2, k=2, p=4, depth=1):
    return RefinerParams(d, h, k, p, depth, np.random.default_rng(seed))


def zero_tables(params):
    params.cls_init = Tensor(np.zeros_like(params.cls_init.data), requires_grad=True)
    params.spatial_table = Tensor(np.zeros_like(params.spatial_table.data), requires_grad=True)
    params.temporal_table_k = Tensor(np.zeros_like(params.temporal_table_k.data),
                                     requires_grad=True)


class TestAssemble:
    def test_zero_tables_give_flattened_patches(self):
        rng = np.random.default_rng(0)
        params = make_refiner()
        zero_tables(params)
        patches = rng.normal(size=(2, 4, 16))
        out = assemble_refiner_input(Tensor(patches), params)
        assert out.shape == (9, 16)
        np.testing.assert_array_equal(out.data[0], 0.0)
        np.testing.assert_array_equal(out.data[1:], patches.reshape(8, 16))

    def test_minimal_sequence_length(self):
        params = make_refiner(k=1, p=1)
        out = assemble_refiner_input(Tensor(np.zeros((1, 1, 16))), params)
        assert out.shape == (2, 16)

    def test_positions_indexed_frame_major(self):
        rng = np.random.default_rng(1)
        params = make_refiner()
        patches = rng.normal(size=(2, 4, 16))
        out = assemble_refiner_input(Tensor(patches), params)
        for k in range(2):
            for p in range(4):
                expected = (patches[k, p] + params.spatial_table.data[p]
                            + params.temporal_table_k.data[k])
                np.testing.assert_array_equal(out.data[1 + k * 4 + p], expected)

    def test_shape_mismatch_rejected(self):
        params = make_refiner()
        with pytest.raises(ValueError):
            assemble_refiner_input(Tensor(np.zeros((2, 3, 16))), params)
        with pytest.raises(ValueError):
            assemble_refiner_input(Tensor(np.zeros((3, 4, 16))), params)

    def test_gradient_reaches_cls_and_tables(self):
        rng = np.random.default_rng(2)
        params = make_refiner(d=8, p=2, k=2)
        patches = Tensor(rng.normal(size=(2, 2, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 8)))
        checked = [patches, params.cls_init, params.spatial_table, params.temporal_table_k]
        report = grad_check(
            lambda: T.tsum(assemble_refiner_input(patches, params) * w), checked
        )
        assert report.passed, report.summary()


class TestVrBlock:
    def test_zero_output_projections_make_identity(self):
        rng = np.random.default_rng(3)
        block = VrBlock(8, 2, rng)
        for proj in (block.gate.w_o, block.attn_temporal.w_o,
                     block.attn_spatial.w_o):
            proj.w = Tensor(np.zeros((8, 8)), requires_grad=True)
        block.mlp.fc2.w = Tensor(np.zeros((32, 8)), requires_grad=True)
        block.mlp.fc2.b = Tensor(np.zeros(8), requires_grad=True)
        seq = rng.normal(size=(9, 8))
        out = vr_block(Tensor(seq), Tensor(rng.normal(size=8)), block, k=2, p=4)
        np.testing.assert_array_equal(out.data, seq)

    def test_gate_stage_is_row_local(self):
        # Before the attention stages mix rows, the gate sublayer must leave
        # untouched rows bit-identical when another row is perturbed.
        rng = np.random.default_rng(4)
        block = VrBlock(8, 2, rng)
        seq = rng.normal(size=(9, 8))
        t_row = Tensor(rng.normal(size=(1, 8)))
        gated = (Tensor(seq) + gate_core(block.ln_gate(Tensor(seq)), t_row, block.gate)).data
        bumped = seq.copy()
        bumped[4] += 1.0
        gated_b = (Tensor(bumped) + gate_core(block.ln_gate(Tensor(bumped)), t_row, block.gate)).data
        rows = [i for i in range(9) if i != 4]
        assert (gated[rows] == gated_b[rows]).all()

    def test_temporal_stage_respects_groups(self):
        # With spatial attention and MLP silenced, perturbing a patch at one
        # spatial slot must not move patch outputs at other slots (the CLS row
        # sees everything, so it may move).
        rng = np.random.default_rng(5)
        block = VrBlock(8, 2, rng)
        block.gate.w_o.w = Tensor(np.zeros((8, 8)), requires_grad=True)
        block.attn_spatial.w_o.w = Tensor(np.zeros((8, 8)), requires_grad=True)
        block.mlp.fc2.w = Tensor(np.zeros((32, 8)), requires_grad=True)
        k, p = 3, 2
        seq = rng.normal(size=(1 + k * p, 8))
        t = Tensor(rng.normal(size=8))
        base = vr_block(Tensor(seq), t, block, k=k, p=p).data
        bumped = seq.copy()
        bumped[1] += 1.0  # frame 0, slot 0
        moved = vr_block(Tensor(bumped), t, block, k=k, p=p).data
        slot_of = lambda row: (row - 1) % p
        for row in range(1, 1 + k * p):
            if slot_of(row) != 0:
                assert (moved[row] == base[row]).all(), f"row {row} leaked across slots"

    def test_gradients_pass_oracle(self):
        rng = np.random.default_rng(6)
        block = VrBlock(16, 2, np.random.default_rng(6))
        widen_weights(block, rng)
        seq = Tensor(rng.normal(size=(9, 16)), requires_grad=True)
        t_cls = Tensor(rng.normal(size=16), requires_grad=True)
        report = grad_check(
            lambda: T.tmean(vr_block(seq, t_cls, block, k=2, p=4)),
            [seq, t_cls] + block.parameters(),
        )
        assert report.passed, report.summary()


class TestRefine:
    def test_single_block_zero_residuals_return_cls_init(self):
        rng = np.random.default_rng(7)
        params = make_refiner(seed=7)
        block = params.blocks[0]
        block.gate.w_o.w = Tensor(np.zeros((16, 16)), requires_grad=True)
        block.attn_temporal.w_o.w = Tensor(np.zeros((16, 16)), requires_grad=True)
        block.attn_spatial.w_o.w = Tensor(np.zeros((16, 16)), requires_grad=True)
        block.mlp.fc2.w = Tensor(np.zeros((64, 16)), requires_grad=True)
        block.mlp.fc2.b = Tensor(np.zeros(16), requires_grad=True)
        out = refine(Tensor(rng.normal(size=(2, 4, 16))), Tensor(rng.normal(size=16)), params)
        np.testing.assert_array_equal(out.data, params.cls_init.data)

    def test_output_dimension(self):
        rng = np.random.default_rng(8)
        params = make_refiner(depth=2)
        out = refine(Tensor(rng.normal(size=(2, 4, 16))), Tensor(rng.normal(size=16)), params)
        assert out.shape == (16,)

    def test_full_connectivity_from_any_patch(self):
        # One temporal plus one spatial stage connect every input patch to the
        # final CLS token.
        rng = np.random.default_rng(9)
        params = make_refiner(seed=9)
        patches = rng.normal(size=(2, 4, 16))
        t = Tensor(rng.normal(size=16))
        base = refine(Tensor(patches), t, params).data
        for k in range(2):
            for p in range(4):
                bumped = patches.copy()
                bumped[k, p] += 0.5
                moved = refine(Tensor(bumped), t, params).data
                assert np.abs(moved - base).max() > 0, f"patch ({k},{p}) unreachable"

    def test_gradient_reaches_every_parameter_and_patch(self):
        rng = np.random.default_rng(10)
        params = make_refiner(seed=10, depth=2)
        patches = Tensor(rng.normal(size=(2, 4, 16)), requires_grad=True)
        t = Tensor(rng.normal(size=16), requires_grad=True)
        out = refine(patches, t, params)
        T.tsum(out * Tensor(rng.normal(size=16))).backward()
        assert patches.grad is not None and np.abs(patches.grad).max() > 0
        assert t.grad is not None and np.abs(t.grad).max() > 0
        for name, p in params.named_parameters():
            assert p.grad is not None, f"{name} got no gradient"
            assert np.abs(p.grad).max() > 0, f"{name} gradient identically zero"

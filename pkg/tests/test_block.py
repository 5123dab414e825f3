import numpy as np
import pytest

from shufflemixer import ops
from shufflemixer.block import (ABLATIONS, ASES_MODES, BlockToggles, ChannelGate, ShuffleMixerBlock,
                                ShuffleStage, ShuffleUnit, SliceMixing, SpatialGate, ViewAggregator,
                                block_forward, rearrange_views, restore_views)
from shufflemixer.gradcheck import _projected_difference
from shufflemixer.nn import Init, freeze_batch_stats
from shufflemixer.tensor import ShapeError, Tensor, backward, no_grad

from conftest import t64, zero_parameters


def _randomize(module, rng, scale=0.3):
    for p in module.parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale


class TestViews:
    def test_round_trip(self, rng):
        vol = rng.standard_normal((2, 4, 4, 4, 3))
        for back in restore_views(rearrange_views(t64(vol))):
            np.testing.assert_array_equal(back.data, vol)

    def test_first_view_slice_is_depth_plane(self):
        vol = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2, 1)
        views = rearrange_views(t64(vol)).data
        np.testing.assert_array_equal(views[0, 0, 0], vol[0, :, :, 0])

    def test_view_axes(self):
        vol = np.arange(27, dtype=np.float64).reshape(1, 3, 3, 3, 1)
        v = rearrange_views(t64(vol)).data[:, 0, ..., 0]
        # (h, w, d) -> view 0 [d, h, w], view 1 [w, h, d], view 2 [h, w, d]
        assert v[0, 2, 1, 0] == vol[0, 1, 0, 2, 0]
        assert v[1, 2, 1, 0] == vol[0, 1, 2, 0, 0]
        assert v[2, 2, 1, 0] == vol[0, 2, 1, 0, 0]

    def test_constant_volume_constant_views(self):
        views = rearrange_views(t64(np.full((1, 3, 3, 3, 2), 4.5))).data
        assert (views == 4.5).all()

    def test_single_view(self, rng):
        vol = rng.standard_normal((1, 2, 2, 2, 1))
        assert rearrange_views(t64(vol), single_view=True).shape == (1, 1, 2, 2, 2, 1)

    def test_non_cubic_rejected(self):
        with pytest.raises(ShapeError):
            rearrange_views(t64(np.zeros((1, 2, 2, 4, 1))))


class TestGates:
    def test_spatial_gate_zero_weights_is_half(self, rng, init64):
        gate = SpatialGate(init64)
        zero_parameters(gate)
        out = gate(t64(rng.standard_normal((2, 4, 4, 3)))).data
        assert out.shape == (2, 4, 4, 1) and (out == 0.5).all()

    def test_spatial_gate_constant_input_is_constant_away_from_border(self, rng, init64):
        gate = SpatialGate(init64)
        _randomize(gate, rng)
        out = gate(t64(np.full((1, 6, 6, 3), 0.7))).data[0, 1:-1, 1:-1, 0]
        assert np.ptp(out) < 1e-14

    def test_spatial_gate_strictly_inside_unit_interval(self, rng, init64):
        gate = SpatialGate(init64)
        _randomize(gate, rng)
        out = gate(t64(rng.standard_normal((2, 5, 5, 4)))).data
        assert ((out > 0) & (out < 1)).all()

    def test_channel_gate_zero_bottleneck_is_half(self, rng, init64):
        gate = ChannelGate(init64, 8)
        zero_parameters(gate)
        assert (gate(t64(rng.standard_normal((3, 4, 4, 8)))).data == 0.5).all()

    def test_channel_gate_constant_input_doubles_bottleneck(self, rng, init64):
        gate = ChannelGate(init64, 4, reduction=2)
        _randomize(gate, rng)
        per_channel = rng.standard_normal(4)
        y = np.broadcast_to(per_channel, (1, 3, 3, 4)).copy()
        f = gate.bottleneck(t64(per_channel.reshape(1, 1, 1, 4))).data
        want = 1.0 / (1.0 + np.exp(-2.0 * f))
        np.testing.assert_allclose(gate(t64(y)).data, want, rtol=1e-12)

    def test_channel_gate_monotone_for_positive_bottleneck(self, init64):
        gate = ChannelGate(init64, 2, reduction=1)
        gate.fc1.weight.data[...] = [[1.0, 0.0], [0.0, 1.0]]
        gate.fc2.weight.data[...] = [[1.0, 0.5], [0.5, 1.0]]
        gate.fc1.bias.data[...] = gate.fc2.bias.data[...] = 0
        y = np.abs(np.random.default_rng(0).standard_normal((1, 3, 3, 2))) + 0.1
        low, high = gate(t64(y)).data, gate(t64(2 * y)).data
        assert (high > low).all()


class TestShuffleUnit:
    def test_zero_weights_are_identity(self, rng, init64):
        stage = ShuffleStage(init64, 4, 1, 2, 2, BlockToggles())
        zero_parameters(stage)
        x = rng.standard_normal((3, 4, 4, 4))
        np.testing.assert_array_equal(stage(t64(x)).data, x)

    def test_neutral_gates_halve_both_branches(self, rng):
        gated = ShuffleUnit(Init(0, dtype=np.float64), 4, 1, 2, 2, True, True, True, reduction=2)
        _randomize(gated, rng)
        zero_parameters(gated.spatial_gate)
        zero_parameters(gated.channel_gate)
        x = t64(rng.standard_normal((2, 4, 4, 4)))
        with_gates = gated(x).data
        # same weights, no gates, branch outputs scaled by exactly 0.5
        del gated.spatial_gate, gated.channel_gate
        for lin in (gated.attn.proj, gated.mlp.fc2):
            lin.weight.data *= 0.5
            lin.bias.data *= 0.5
        np.testing.assert_allclose(gated(x).data, with_gates, rtol=0, atol=1e-13)

    def test_single_window_pure_and_shuffled_agree(self, rng):
        a = ShuffleUnit(Init(5, dtype=np.float64), 4, 1, 4, 2, False, True, True)
        b = ShuffleUnit(Init(5, dtype=np.float64), 4, 1, 4, 2, True, True, True)
        x = t64(rng.standard_normal((2, 4, 4, 4)))
        np.testing.assert_array_equal(a(x).data, b(x).data)


class TestSliceMixing:
    def test_passthrough_selector(self, rng, init64):
        mix = SliceMixing(init64, 3, 4)
        zero_parameters(mix)
        mix.mlp_cp.weight.data[8:, :] = np.eye(4)
        z = rng.standard_normal((3, 1, 3, 2, 2, 4))
        np.testing.assert_array_equal(mix(t64(z)).data, z)

    def _permutation_case(self, rng, init64, ape):
        mix = SliceMixing(init64, 4, 3)
        _randomize(mix, rng)
        mix.ape_s.data[...] = ape
        mix.mlp_st.weight.data[...] = np.eye(4)
        mix.mlp_st.bias.data[...] = 0
        z = rng.standard_normal((1, 1, 4, 2, 2, 3))
        perm = np.array([2, 0, 3, 1])
        return mix(t64(z)).data[:, :, perm], mix(t64(z[:, :, perm])).data

    def test_equivariant_without_position_embedding(self, rng, init64):
        a, b = self._permutation_case(rng, init64, 0.0)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_position_embedding_breaks_equivariance(self, rng, init64):
        ape = np.random.default_rng(9).standard_normal((4, 3))
        a, b = self._permutation_case(rng, init64, ape)
        assert np.abs(a - b).max() > 1e-3

    def test_dense_variant_shape(self, rng, init64):
        mix = SliceMixing(init64, 2, 3, dense=True)
        assert mix(t64(rng.standard_normal((3, 2, 2, 2, 2, 3)))).shape == (3, 2, 2, 2, 2, 3)

    def test_wrong_slice_count_rejected(self, init64):
        with pytest.raises(ShapeError):
            SliceMixing(init64, 3, 4)(t64(np.zeros((1, 1, 2, 2, 2, 4))))


class TestAggregator:
    def test_selector_returns_normalized_first_view(self, rng, init64):
        agg = ViewAggregator(init64, 3)
        zero_parameters(agg)
        agg.norm.weight.data[...] = 1
        agg.mlp_va.weight.data[:3] = np.eye(3)
        vols = [rng.standard_normal((1, 2, 2, 2, 3)) for _ in range(3)]
        cat = np.concatenate(vols, axis=-1)
        ln = (cat - cat.mean(-1, keepdims=True)) / np.sqrt(cat.var(-1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(agg([t64(v) for v in vols]).data, ln[..., :3], atol=1e-12)

    def _swap(self, rng, init64, ape):
        agg = ViewAggregator(init64, 2)
        _randomize(agg, rng)
        agg.ape_v.data[...] = ape
        for arr in (agg.mlp_va.weight.data, agg.norm.weight.data, agg.norm.bias.data):
            arr[4:6] = arr[2:4]  # symmetric in views 2 and 3
        vols = [t64(rng.standard_normal((1, 2, 2, 2, 2))) for _ in range(3)]
        return agg(vols).data, agg([vols[0], vols[2], vols[1]]).data

    def test_symmetric_views_swap_invariant(self, rng, init64):
        a, b = self._swap(rng, init64, np.ones((3, 2)) * 0.3)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_distinct_embeddings_break_symmetry(self, rng, init64):
        a, b = self._swap(rng, init64, np.arange(6.0).reshape(3, 2))
        assert np.abs(a - b).max() > 1e-6

    def test_zero_inputs_give_constant(self, init64):
        agg = ViewAggregator(init64, 2)
        agg.ape_v.data[...] = 0
        out = agg([t64(np.zeros((1, 2, 2, 2, 2)))] * 3).data
        np.testing.assert_allclose(out, np.broadcast_to(agg.mlp_va.bias.data + agg.norm.bias.data @
                                                        agg.mlp_va.weight.data, out.shape), atol=1e-12)


class TestBlock:
    @pytest.mark.parametrize("side,window", [(8, 4), (4, 4), (2, 4), (1, 4)])
    def test_shape_preserved(self, rng, side, window):
        block = ShuffleMixerBlock(Init(0), side, 8, 2, window)
        vol = Tensor(rng.standard_normal((2, side, side, side, 8)).astype(np.float32))
        assert block_forward(vol, block).shape == vol.shape

    @pytest.mark.parametrize("ablate", ABLATIONS)
    def test_every_ablation_runs(self, rng, ablate):
        block = ShuffleMixerBlock(Init(0), 4, 4, 1, 2, toggles=BlockToggles.from_names(ablate))
        vol = Tensor(rng.standard_normal((1, 4, 4, 4, 4)).astype(np.float32))
        assert block_forward(vol, block).shape == vol.shape

    def test_single_view_is_first_view_pipeline(self, rng):
        t = BlockToggles.from_names("single-view")
        block = ShuffleMixerBlock(Init(2, dtype=np.float64), 4, 4, 1, 2, toggles=t)
        vol = t64(rng.standard_normal((2, 4, 4, 4, 4)))
        views = ops.narrow(rearrange_views(vol), 0, 0, 1)
        want = restore_views(block.mix(block.shuffle_views(views)))[0]
        np.testing.assert_array_equal(block_forward(vol, block).data, want.data)

    def test_toggle_names(self):
        assert BlockToggles.from_names("dense-mlp").mixing == "dense"
        t = BlockToggles.from_names(None, "spatial-only")
        assert t.ases_spatial and not t.ases_channel
        assert len(ASES_MODES) == 4
        with pytest.raises(ValueError):
            BlockToggles.from_names("bogus")
        with pytest.raises(ValueError):
            BlockToggles.from_names(None, "sometimes")

    def test_view_count_checked(self, rng):
        block = ShuffleMixerBlock(Init(0), 2, 2, 1, 2)
        with pytest.raises(ShapeError):
            block(views=Tensor(np.zeros((1, 1, 2, 2, 2, 2), np.float32)))

    def test_gradients_match_finite_differences(self):
        """d mean(block(x)) / d theta on an 8^3, 8-channel, one-head block with 4x4 windows."""
        rng = np.random.default_rng(0)
        block = ShuffleMixerBlock(Init(1, dtype=np.float64), 8, 8, 1, 4)
        for p in block.parameters():
            p.data += 0.3 * rng.standard_normal(p.shape)
        freeze_batch_stats(block, True)
        x = t64(rng.standard_normal((1, 8, 8, 8, 8)))
        with no_grad():
            proj = np.full(block_forward(x, block).shape, 1.0 / x.size)

        def output():
            with no_grad():
                return block_forward(x, block).data

        with ops.record_branches() as base:
            output()
        backward(ops.mean(block_forward(x, block)))
        worst = 0.0
        for name, p in block.named_parameters():
            for _ in range(2):
                idx = tuple(int(i) for i in np.unravel_index(rng.integers(p.size), p.shape))
                num, _, smooth = _projected_difference(output, proj, p.data, idx, 1e-5, base)
                assert smooth, name
                a = p.grad[idx]
                if abs(a) > 1e-12:
                    worst = max(worst, abs(a - num) / max(abs(a), abs(num)))
                else:
                    assert abs(num) < 1e-9, name
        assert worst < 1e-5

"""The 3D Shuffle-Mixer block.

A volume feature ``(B, H, W, D, C)`` is rearranged into three slice stacks
(views) that are processed with one shared set of weights.  Views are stacked
on a leading axis, giving a ``(V, B, S, P, Q, C)`` tensor with ``S`` slices of
``P x Q`` tokens each:

* view 0: ``D`` slices of ``(H, W)``
* view 1: ``W`` slices of ``(H, D)``
* view 2: ``H`` slices of ``(W, D)``

Batch statistics are computed per view, so stacking gives the same result as
running each view separately.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from . import ops
from .attention import WindowAttention, effective_window, rotation_restore, transpose_shuffle
from .nn import BatchNorm, Init, LayerNorm, Linear, Module
from .tensor import ShapeError

# volume (B, H, W, D, C) -> view (B, S, P, Q, C)
VIEW_PERMS = ((0, 3, 1, 2, 4), (0, 2, 1, 3, 4), (0, 1, 2, 3, 4))
VIEW_INVERSE = ((0, 2, 3, 1, 4), (0, 2, 1, 3, 4), (0, 1, 2, 3, 4))

ABLATIONS = ("no-shuffle", "single-view", "no-mixing", "dense-mlp", "mixer-first", "no-ape-s", "no-ape-v")
ASES_MODES = ("on", "off", "spatial-only", "channel-only")


@dataclass(frozen=True)
class BlockToggles:
    shuffle: bool = True
    single_view: bool = False
    mixing: str = "axial"  # axial | dense | none
    mixer_first: bool = False
    ape_s: bool = True
    ape_v: bool = True
    ases_spatial: bool = True
    ases_channel: bool = True

    @classmethod
    def from_names(cls, ablate: Optional[str] = None, ases: str = "on") -> "BlockToggles":
        t = cls()
        if ases not in ASES_MODES:
            raise ValueError(f"unknown ASES mode {ases!r}")
        t = replace(t, ases_spatial=ases in ("on", "spatial-only"), ases_channel=ases in ("on", "channel-only"))
        if ablate in (None, "", "none"):
            return t
        changes = {
            "no-shuffle": dict(shuffle=False),
            "single-view": dict(single_view=True),
            "no-mixing": dict(mixing="none"),
            "dense-mlp": dict(mixing="dense"),
            "mixer-first": dict(mixer_first=True),
            "no-ape-s": dict(ape_s=False),
            "no-ape-v": dict(ape_v=False),
        }
        try:
            return replace(t, **changes[ablate])
        except KeyError:
            raise ValueError(f"unknown block ablation {ablate!r}") from None

    @property
    def num_views(self) -> int:
        return 1 if self.single_view else 3


def rearrange_views(vol, single_view: bool = False):
    """``(B, H, W, D, C) -> (V, B, S, P, Q, C)``; pure axis permutations."""
    b, h, w, d, c = vol.shape
    if not (h == w == d):
        raise ShapeError(f"views need a cubic volume, got {h}x{w}x{d}")
    perms = VIEW_PERMS[:1] if single_view else VIEW_PERMS
    stacks = [ops.reshape(ops.permute(vol, p), (1, b, h, h, h, c)) for p in perms]
    return stacks[0] if single_view else ops.concat(stacks, axis=0)


def restore_views(views) -> list:
    """Inverse of :func:`rearrange_views`: one ``(B, H, W, D, C)`` volume per view."""
    v, b, s, p, q, c = views.shape
    out = []
    for i in range(v):
        one = ops.reshape(ops.narrow(views, 0, i, 1), (b, s, p, q, c))
        out.append(ops.permute(one, VIEW_INVERSE[i]))
    return out


class SpatialGate(Module):
    """sigmoid(conv3x3([channel mean; channel max])) -> (N, P, Q, 1)."""

    def __init__(self, init: Init):
        self.weight = init.trunc_normal((3, 3, 2, 1))
        self.bias = init.zeros((1,))

    def __call__(self, z):
        return ops.sigmoid(ops.conv2d(ops.channel_mean_max(z), self.weight, self.bias, padding=1))


class ChannelGate(Module):
    """sigmoid(f(avgpool) + f(maxpool)) per slice, with a shared bottleneck ``f``.

    ``f`` is Linear -> GELU -> Linear; GELU matches the rest of the network
    and keeps the gate smooth.
    """

    def __init__(self, init: Init, channels: int, reduction: int = 4):
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(init, channels, hidden)
        self.fc2 = Linear(init, hidden, channels)

    def bottleneck(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))

    def __call__(self, y):
        avg = ops.global_avg_pool(y, (1, 2))
        mx = ops.global_max_pool(y, (1, 2))
        return ops.sigmoid(ops.add(self.bottleneck(avg), self.bottleneck(mx)))


class Mlp(Module):
    def __init__(self, init: Init, channels: int, ratio: int):
        self.fc1 = Linear(init, channels, ratio * channels)
        self.fc2 = Linear(init, ratio * channels, channels)

    def __call__(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class DepthwiseConv(Module):
    def __init__(self, init: Init, channels: int, kernel: int = 5):
        self.weight = init.fan_in((kernel, kernel, channels), kernel * kernel)
        self.bias = init.zeros((channels,))
        self.pad = kernel // 2

    def __call__(self, x):
        return ops.depthwise_conv2d(x, self.weight, self.bias, padding=self.pad)


class ShuffleUnit(Module):
    """BN -> W-MSA (+res) -> DWConv5x5 (+res) -> BN -> MLP (+res).

    With ``shuffled`` the attention runs between a transpose shuffle and a
    rotation restore.  ASES gates, when present, scale the attention branch
    spatially and the MLP branch per channel, both computed from the
    normalised branch input.
    """

    def __init__(self, init: Init, channels: int, heads: int, window: int, mlp_ratio: int,
                 shuffled: bool, spatial_gate: bool, channel_gate: bool, reduction: int = 4):
        self.window, self.shuffled = window, shuffled
        self.norm_attn = BatchNorm(init, channels)
        self.attn = WindowAttention(init, channels, heads, window)
        if spatial_gate:
            self.spatial_gate = SpatialGate(init)
        self.dwconv = DepthwiseConv(init, channels)
        self.norm_mlp = BatchNorm(init, channels)
        self.mlp = Mlp(init, channels, mlp_ratio)
        if channel_gate:
            self.channel_gate = ChannelGate(init, channels, reduction)

    def attention_branch(self, zn):
        if self.shuffled:
            return rotation_restore(self.attn(transpose_shuffle(zn, self.window)), self.window)
        return self.attn(zn)

    def __call__(self, x, groups: int = 1):
        zn = self.norm_attn(x, groups)
        a = self.attention_branch(zn)
        if hasattr(self, "spatial_gate"):
            a = ops.mul(self.spatial_gate(zn), a)
        x = ops.add(a, x)
        x = ops.add(self.dwconv(x), x)
        yn = self.norm_mlp(x, groups)
        m = self.mlp(yn)
        if hasattr(self, "channel_gate"):
            m = ops.mul(self.channel_gate(yn), m)
        return ops.add(m, x)


class ShuffleStage(Module):
    """Pure sub-unit followed by the shuffled sub-unit, on ``(N, P, Q, C)`` slices."""

    def __init__(self, init: Init, channels: int, heads: int, window: int, mlp_ratio: int,
                 toggles: BlockToggles, reduction: int = 4):
        kw = dict(spatial_gate=toggles.ases_spatial, channel_gate=toggles.ases_channel, reduction=reduction)
        self.pure = ShuffleUnit(init, channels, heads, window, mlp_ratio, shuffled=False, **kw)
        self.shuffle = ShuffleUnit(init, channels, heads, window, mlp_ratio, shuffled=toggles.shuffle, **kw)

    def __call__(self, x, groups: int = 1):
        return self.shuffle(self.pure(x, groups), groups)


class SliceMixing(Module):
    """Slice-aware context mixing on ``(V, B, S, P, Q, C)``.

    ``A = Z + APE_s``; the slice-axis and channel-axis linear maps of ``A``
    are concatenated with the untouched ``Z`` as ``[st; sc; Z]`` and projected
    back to ``C``.  The dense variant replaces both axial maps with one
    ``S*C -> S*C`` map and projects ``[dense; Z]``.
    """

    def __init__(self, init: Init, slices: int, channels: int, dense: bool = False, ape: bool = True):
        self.slices, self.channels, self.dense = slices, channels, dense
        if ape:
            self.ape_s = init.trunc_normal((slices, channels))
        if dense:
            self.mlp_dense = Linear(init, slices * channels, slices * channels)
            self.mlp_cp = Linear(init, 2 * channels, channels)
        else:
            self.mlp_st = Linear(init, slices, slices)
            self.mlp_sc = Linear(init, channels, channels)
            self.mlp_cp = Linear(init, 3 * channels, channels)

    def __call__(self, z):
        v, b, s, p, q, c = z.shape
        if s != self.slices or c != self.channels:
            raise ShapeError(f"mixing built for {self.slices} slices x {self.channels} channels, got {s} x {c}")
        a = z
        if hasattr(self, "ape_s"):
            a = ops.add(a, ops.reshape(self.ape_s, (1, 1, s, 1, 1, c)))
        if self.dense:
            t = ops.reshape(ops.permute(a, (0, 1, 3, 4, 2, 5)), (v, b, p, q, s * c))
            t = ops.reshape(self.mlp_dense(t), (v, b, p, q, s, c))
            branches = [ops.permute(t, (0, 1, 4, 2, 3, 5)), z]
        else:
            st = self.mlp_st(ops.permute(a, (0, 1, 3, 4, 5, 2)))
            st = ops.permute(st, (0, 1, 5, 2, 3, 4))
            branches = [st, self.mlp_sc(a), z]
        return self.mlp_cp(ops.concat(branches, axis=-1))


class ViewAggregator(Module):
    """``MLP_va(LN(concat[V_v + APE_v]))`` over the three restored views."""

    def __init__(self, init: Init, channels: int, ape: bool = True):
        self.channels = channels
        if ape:
            self.ape_v = init.trunc_normal((3, channels))
        self.norm = LayerNorm(init, 3 * channels)
        self.mlp_va = Linear(init, 3 * channels, channels)

    def __call__(self, vols):
        if len(vols) != 3 or any(v.shape != vols[0].shape for v in vols):
            raise ShapeError("aggregator needs three equally shaped view volumes")
        parts = []
        for i, vol in enumerate(vols):
            if hasattr(self, "ape_v"):
                vol = ops.add(vol, ops.reshape(ops.narrow(self.ape_v, 0, i, 1), (self.channels,)))
            parts.append(vol)
        return self.mlp_va(self.norm(ops.concat(parts, axis=-1)))


class ShuffleMixerBlock(Module):
    """Shuffle -> Mixing -> Aggregator on a cubic ``(B, n, n, n, C)`` volume."""

    def __init__(self, init: Init, side: int, channels: int, heads: int, window: int, mlp_ratio: int = 4,
                 toggles: BlockToggles = BlockToggles(), reduction: int = 4):
        self.side, self.channels, self.toggles = side, channels, toggles
        self.window = effective_window(side, window)
        if side % self.window:
            raise ShapeError(f"window {self.window} does not divide slice side {side}")
        self.shuffle = ShuffleStage(init, channels, heads, self.window, mlp_ratio, toggles, reduction)
        if toggles.mixing != "none":
            self.mixing = SliceMixing(init, side, channels, dense=toggles.mixing == "dense", ape=toggles.ape_s)
        if not toggles.single_view:
            self.aggregator = ViewAggregator(init, channels, ape=toggles.ape_v)

    def shuffle_views(self, views):
        v, b, s, p, q, c = views.shape
        flat = ops.reshape(views, (v * b * s, p, q, c))
        return ops.reshape(self.shuffle(flat, groups=v), (v, b, s, p, q, c))

    def mix(self, views):
        return self.mixing(views) if hasattr(self, "mixing") else views

    def __call__(self, vol=None, views=None):
        """Return ``(volume_out, post_shuffle_views)``.

        ``views`` replaces the rearranged input volume, e.g. when a skip
        connection has already produced per-view features.
        """
        if views is None:
            views = rearrange_views(vol, self.toggles.single_view)
        if views.shape[0] != self.toggles.num_views:
            raise ShapeError(f"expected {self.toggles.num_views} views, got {views.shape[0]}")
        x = views
        if self.toggles.mixer_first:
            x = self.mix(x)
        shuffled = self.shuffle_views(x)
        x = shuffled if self.toggles.mixer_first else self.mix(shuffled)
        vols = restore_views(x)
        out = vols[0] if self.toggles.single_view else self.aggregator(vols)
        return out, shuffled


def block_forward(vol, block: ShuffleMixerBlock):
    return block(vol)[0]

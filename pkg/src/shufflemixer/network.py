"""Encoder-decoder pyramid built from Shuffle-Mixer blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

from . import ops
from .attention import WindowAttention, effective_window, window_partition, window_reverse, WindowGrid
from .block import ABLATIONS, ASES_MODES, BlockToggles, ShuffleMixerBlock, rearrange_views
from .nn import BatchNorm, Init, Linear, Module
from .tensor import DEFAULT_DTYPE, ShapeError

SKIP_KINDS = ("crossmerge", "catlinear", "catskip", "crossskip", "catcrossskip")


class ConfigError(ValueError):
    pass


class WiringError(RuntimeError):
    pass


@dataclass(frozen=True)
class PyramidConfig:
    input_size: int = 128
    in_channels: int = 1
    out_channels: int = 2
    channels: tuple = (96, 192, 384, 768)
    blocks: tuple = (1, 2, 8, 1)
    heads: tuple = (3, 6, 12, 24)
    windows: tuple = (4, 4, 4, 4)
    mlp_ratio: int = 4
    reduction: int = 4
    ases: str = "on"
    skip: str = "crossmerge"
    ablate: Optional[str] = None

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    @property
    def toggles(self) -> BlockToggles:
        return BlockToggles.from_names(self.ablate, self.ases)

    def stage_side(self, s: int) -> int:
        return self.input_size // (4 * 2 ** s)

    def stage_window(self, s: int) -> int:
        return effective_window(self.stage_side(s), self.windows[s])

    def validate(self) -> "PyramidConfig":
        n = self.num_stages
        if not (len(self.blocks) == len(self.heads) == len(self.windows) == n) or n < 1:
            raise ConfigError("channels, blocks, heads and windows need one entry per stage")
        if self.input_size % (4 * 2 ** (n - 1)):
            raise ConfigError(f"input size {self.input_size} not divisible by {4 * 2 ** (n - 1)}")
        if self.channels[0] % 4:
            raise ConfigError("stage-1 channels must be divisible by 4 (stem and head halve them twice)")
        if self.ases not in ASES_MODES:
            raise ConfigError(f"unknown ASES mode {self.ases!r}")
        if self.skip not in SKIP_KINDS:
            raise ConfigError(f"unknown skip kind {self.skip!r}")
        if self.ablate not in (None, *ABLATIONS):
            raise ConfigError(f"unknown ablation {self.ablate!r}")
        for s in range(n):
            c, h = self.channels[s], self.heads[s]
            if s and c != 2 * self.channels[s - 1]:
                raise ConfigError(f"stage {s + 1}: channels must double per stage")
            if c % h:
                raise ConfigError(f"stage {s + 1}: {c} channels not divisible by {h} heads")
            side, win = self.stage_side(s), self.stage_window(s)
            if side % win:
                raise ConfigError(f"stage {s + 1}: window {win} does not divide token side {side}")
            if self.blocks[s] < 1:
                raise ConfigError(f"stage {s + 1}: needs at least one block")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_CONFIG = PyramidConfig()
DESK_CONFIG = PyramidConfig(input_size=32, channels=(16, 32, 64, 128), blocks=(1, 1, 2, 1), heads=(2, 4, 8, 16))
TINY_CONFIG = PyramidConfig(input_size=16, channels=(4, 8, 16), blocks=(1, 1, 1), heads=(1, 2, 2),
                            windows=(2, 2, 2))


class SkipCache:
    """Encoder features per (stage, view); each entry is written and read once."""

    def __init__(self):
        self._store: dict[int, object] = {}
        self._written: set[tuple[int, int]] = set()
        self._read: set[tuple[int, int]] = set()

    def put(self, stage: int, views) -> None:
        keys = {(stage, v) for v in range(views.shape[0])}
        if keys & self._written:
            raise WiringError(f"skip cache overflow at stage {stage + 1}")
        self._written |= keys
        self._store[stage] = views

    def take(self, stage: int):
        if stage not in self._store:
            raise WiringError(f"skip cache underflow at stage {stage + 1}")
        views = self._store.pop(stage)
        self._read |= {(stage, v) for v in range(views.shape[0])}
        return views

    def close(self) -> None:
        if self._store or self._written != self._read:
            raise WiringError(f"unconsumed skip entries: {sorted(self._written - self._read)}")


# ---------------------------------------------------------------------------
# skip connections (per view, shared weights)
# ---------------------------------------------------------------------------

def _flat(views):
    v, b, s, p, q, c = views.shape
    return ops.reshape(views, (v * b * s, p, q, c))


class _WindowSkip(Module):
    fused_qkv = True

    def __init__(self, init: Init, channels: int, heads: int, window: int):
        self.channels, self.window = channels, window
        self.attn = WindowAttention(init, channels, heads, window, fused_qkv=self.fused_qkv)

    def __call__(self, enc, dec):
        if enc.shape != dec.shape:
            raise ShapeError(f"skip feature {enc.shape} does not match decoder feature {dec.shape}")
        e, d = _flat(enc), _flat(dec)
        grid = WindowGrid(d.shape[1], d.shape[2], self.window)
        out = self.merge(window_partition(e, self.window), window_partition(d, self.window))
        return ops.reshape(window_reverse(out, grid, d.shape[0]), dec.shape)


class CrossMerge(_WindowSkip):
    """Decoder queries against encoder+decoder keys and values.

    The attention's fused ``C -> 3C`` projection is the decoder-side
    projection; the encoder side has its own ``C -> 2C`` projection.
    """

    def __init__(self, init, channels, heads, window):
        super().__init__(init, channels, heads, window)
        self.enc_proj = Linear(init, channels, 2 * channels)

    def merge(self, e, d):
        c = self.channels
        ke, ve = ops.split(self.enc_proj(e), [c, c], axis=-1)
        qd, kd, vd = self.attn.qkv_windows(d)
        return self.attn.proj(self.attn.attend_windows(qd, ops.add(ke, kd), ops.add(ve, vd)))


class CrossSkip(_WindowSkip):
    """Queries from the decoder, keys/values from the encoder, one shared projection."""

    def merge(self, e, d):
        qd, _, _ = self.attn.qkv_windows(d)
        _, ke, ve = self.attn.qkv_windows(e)
        return self.attn.proj(self.attn.attend_windows(qd, ke, ve))


class CatSkip(_WindowSkip):
    """Channel concat, linear fuse to ``C``, windowed self-attention."""

    def __init__(self, init, channels, heads, window):
        super().__init__(init, channels, heads, window)
        self.fuse = Linear(init, 2 * channels, channels)

    def merge(self, e, d):
        x = self.fuse(ops.concat([d, e], axis=-1))
        q, k, v = self.attn.qkv_windows(x)
        return self.attn.proj(self.attn.attend_windows(q, k, v))


class CatCrossSkip(_WindowSkip):
    """Queries from the decoder; keys/values projected from ``[D; E]``."""

    fused_qkv = False

    def __init__(self, init, channels, heads, window):
        super().__init__(init, channels, heads, window)
        self.q_proj = Linear(init, channels, channels)
        self.kv_proj = Linear(init, 2 * channels, 2 * channels)

    def merge(self, e, d):
        c = self.channels
        k, v = ops.split(self.kv_proj(ops.concat([d, e], axis=-1)), [c, c], axis=-1)
        return self.attn.proj(self.attn.attend_windows(self.q_proj(d), k, v))


class CatLinear(Module):
    def __init__(self, init: Init, channels: int, heads: int = 1, window: int = 1):
        self.fuse = Linear(init, 2 * channels, channels)

    def __call__(self, enc, dec):
        if enc.shape != dec.shape:
            raise ShapeError(f"skip feature {enc.shape} does not match decoder feature {dec.shape}")
        return self.fuse(ops.concat([dec, enc], axis=-1))


SKIP_MODULES = {
    "crossmerge": CrossMerge,
    "catlinear": CatLinear,
    "catskip": CatSkip,
    "crossskip": CrossSkip,
    "catcrossskip": CatCrossSkip,
}


def skip_variant(enc, dec, module: Module):
    return module(enc, dec)


def cross_merge(enc, dec, module: CrossMerge):
    return module(enc, dec)


# ---------------------------------------------------------------------------
# pyramid pieces
# ---------------------------------------------------------------------------

class Conv3d(Module):
    def __init__(self, init: Init, cin: int, cout: int, kernel: int, stride: int, padding: int,
                 bias: bool = True):
        self.weight = init.fan_in((kernel, kernel, kernel, cin, cout), kernel ** 3 * cin)
        if bias:
            self.bias = init.zeros((cout,))
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return ops.conv3d(x, self.weight, getattr(self, "bias", None), stride=self.stride, padding=self.padding)


class ConvTranspose3d(Module):
    """Kernel 2, stride 2: doubles resolution."""

    def __init__(self, init: Init, cin: int, cout: int):
        self.weight = init.fan_in((cin, 2, 2, 2, cout), cin)
        self.bias = init.zeros((cout,))

    def __call__(self, x):
        return ops.conv_transpose3d(x, self.weight, self.bias)


class PatchEmbed(Module):
    """Convolutional stem: two k3/s2 convolutions, each followed by BN and GELU.

    The convolutions have no bias because the batch norm would cancel it.
    """

    def __init__(self, init: Init, cin: int, cout: int):
        self.conv1 = Conv3d(init, cin, cout // 2, 3, 2, 1, bias=False)
        self.norm1 = BatchNorm(init, cout // 2)
        self.conv2 = Conv3d(init, cout // 2, cout, 3, 2, 1, bias=False)
        self.norm2 = BatchNorm(init, cout)

    def __call__(self, x):
        if any(n % 4 for n in x.shape[1:4]):
            raise ShapeError(f"stem needs spatial extents divisible by 4, got {x.shape[1:4]}")
        x = ops.gelu(self.norm1(self.conv1(x)))
        return ops.gelu(self.norm2(self.conv2(x)))


class Downsample(Module):
    def __init__(self, init: Init, cin: int):
        self.conv = Conv3d(init, cin, 2 * cin, 3, 2, 1)

    def __call__(self, x):
        if any(n % 2 for n in x.shape[1:4]):
            raise ShapeError(f"downsampling needs even extents, got {x.shape[1:4]}")
        return self.conv(x)


class Upsample(Module):
    def __init__(self, init: Init, cin: int):
        self.conv = ConvTranspose3d(init, cin, cin // 2)

    def __call__(self, x):
        return self.conv(x)


class Head(Module):
    """Two k2/s2 transposed convolutions back to input resolution, then a k1 projection.

    A k3 convolution of the raw input is added before the projection.  The
    token path alone can only place boundaries at the stem's 4-voxel
    granularity.
    """

    def __init__(self, init: Init, cin: int, cout: int, in_channels: int = 1):
        self.up1 = ConvTranspose3d(init, cin, cin // 2)
        self.up2 = ConvTranspose3d(init, cin // 2, cin // 4)
        self.full = Conv3d(init, in_channels, cin // 4, 3, 1, 1)
        self.proj = Linear(init, cin // 4, cout)
        self.proj.weight = init.fan_in((cin // 4, cout), cin // 4)

    def __call__(self, h, x):
        return self.proj(ops.add(self.up2(self.up1(h)), self.full(x)))


class Stage(Module):
    def __init__(self, blocks: list):
        self.blocks = blocks

    def __iter__(self):
        return iter(self.blocks)


class ShuffleMixerNet(Module):
    def __init__(self, config: PyramidConfig, init: Init):
        config.validate()
        self.config = config
        cfg = config
        toggles = cfg.toggles
        n = cfg.num_stages
        self.stem = PatchEmbed(init, cfg.in_channels, cfg.channels[0])

        def make_block(s):
            return ShuffleMixerBlock(init, cfg.stage_side(s), cfg.channels[s], cfg.heads[s], cfg.windows[s],
                                     cfg.mlp_ratio, toggles, cfg.reduction)

        self.encoder = [Stage([make_block(s) for _ in range(cfg.blocks[s])]) for s in range(n)]
        self.down = [Downsample(init, cfg.channels[s]) for s in range(n - 1)]
        self.up = [Upsample(init, cfg.channels[s + 1]) for s in range(n - 1)]
        skip_cls = SKIP_MODULES[cfg.skip]
        self.skips = [skip_cls(init, cfg.channels[s], cfg.heads[s], cfg.stage_window(s)) for s in range(n - 1)]
        self.decoder = [Stage([make_block(s) for _ in range(cfg.blocks[s])]) for s in range(n - 1)]
        self.head = Head(init, cfg.channels[0], cfg.out_channels, cfg.in_channels)

    def __call__(self, x):
        cfg = self.config
        expected = (cfg.input_size,) * 3 + (cfg.in_channels,)
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"input must be (B, {', '.join(map(str, expected))}), got {x.shape}")
        last = cfg.num_stages - 1
        cache = SkipCache()
        h = self.stem(x)
        for s, stage in enumerate(self.encoder):
            if s:
                h = self.down[s - 1](h)
            views = None
            for blk in stage:
                h, views = blk(h)
            if s < last:
                cache.put(s, views)
        for s in reversed(range(last)):
            h = self.up[s](h)
            merged = self.skips[s](cache.take(s), rearrange_views(h, cfg.toggles.single_view))
            for j, blk in enumerate(self.decoder[s]):
                h, _ = blk(views=merged) if j == 0 else blk(h)
        cache.close()
        return self.head(h, x)


def build_model(config: PyramidConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> ShuffleMixerNet:
    model = ShuffleMixerNet(config, Init(seed, dtype=dtype))
    for name, p in model.named_parameters():
        p.name = name
    return model


def network_forward(x, model: ShuffleMixerNet, mode: str = "eval"):
    model.train(mode == "train")
    return model(x)

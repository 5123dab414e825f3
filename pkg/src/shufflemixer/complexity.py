"""Analytic FLOPs and parameter counts.

FLOP counts evaluate the closed-form cost expressions term by term: nothing
is added for biases, norms or activations, and the view aggregator
(``3HWDC^2``) is left out of the block total.  Parameter counts are derived
from the configuration alone and audited against an instantiated model.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

from .block import BlockToggles
from .network import PyramidConfig


@dataclass(frozen=True)
class CostModel:
    H: int
    W: int
    D: int
    C: int
    M: int
    alpha: int = 4

    def __post_init__(self):
        if min(self.H, self.W, self.D, self.C, self.M, self.alpha) < 1:
            raise ValueError("cost model extents must be positive")
        if self.M > min(self.H, self.W):
            raise ValueError("window larger than the slice")


def flops_attention(cm: CostModel, kind: str = "w-msa") -> int:
    hw, c = cm.H * cm.W, cm.C
    if kind == "w-msa":
        return 4 * hw * c * c + 2 * cm.M ** 2 * hw * c
    if kind == "pure-msa":
        return 4 * hw * c * c + 2 * hw * hw * c
    raise ValueError(f"unknown attention kind {kind!r}")


def flops_mixing(cm: CostModel, kind: str = "a-mlp") -> int:
    hwd, c, d, a = cm.H * cm.W * cm.D, cm.C, cm.D, cm.alpha
    # 3C -> C channel projection, multiply-accumulates counted as 2 FLOPs
    proj = 2 * 3 * hwd * c * c
    if kind == "a-mlp":
        return 2 * a * hwd * c * (d + c) + proj
    if kind == "d-mlp":
        return 2 * a * hwd * c * (d * c) + proj
    if kind == "d-msa":
        return 8 * hwd * c * c + 2 * hwd * hwd * c + 2 * a * hwd * c * c
    raise ValueError(f"unknown mixing kind {kind!r}")


def flops_block(cm: CostModel) -> int:
    return flops_attention(cm, "w-msa") + flops_mixing(cm, "a-mlp")


@dataclass
class StageCost:
    stage: int
    side: int
    channels: int
    window: int
    blocks: int
    w_msa: int
    pure_msa: int
    a_mlp: int
    d_mlp: int
    block: int

    @property
    def total(self) -> int:
        return self.block * self.blocks


@dataclass
class CostReport:
    stages: list
    params_by_group: "OrderedDict[str, int]"

    @property
    def total_flops(self) -> int:
        return sum(s.total for s in self.stages)

    @property
    def total_params(self) -> int:
        return sum(self.params_by_group.values())

    def to_records(self) -> list[str]:
        out = []
        for s in self.stages:
            p = f"stage{s.stage}"
            out += [f"{p}.side={s.side}", f"{p}.channels={s.channels}", f"{p}.window={s.window}",
                    f"{p}.blocks={s.blocks}", f"{p}.flops.w_msa={s.w_msa}", f"{p}.flops.pure_msa={s.pure_msa}",
                    f"{p}.flops.a_mlp={s.a_mlp}", f"{p}.flops.d_mlp={s.d_mlp}",
                    f"{p}.flops.block={s.block}", f"{p}.flops.total={s.total}"]
        out.append(f"total.flops={self.total_flops}")
        out.append(f"total.params={self.total_params}")
        return out

    def to_text(self) -> str:
        head = f"{'stage':>5} {'side':>5} {'C':>5} {'M':>3} {'blocks':>6} {'W-MSA':>14} {'pure MSA':>14} " \
               f"{'A-MLP-M':>14} {'D-MLP-M':>14} {'SM-B total':>16}"
        rows = [head, "-" * len(head)]
        for s in self.stages:
            rows.append(f"{s.stage:>5} {s.side:>5} {s.channels:>5} {s.window:>3} {s.blocks:>6} {s.w_msa:>14} "
                        f"{s.pure_msa:>14} {s.a_mlp:>14} {s.d_mlp:>14} {s.total:>16}")
        rows.append(f"total FLOPs (block formula): {self.total_flops}")
        rows.append(f"total parameters: {self.total_params}")
        return "\n".join(rows)


def cost_report(cfg: PyramidConfig) -> CostReport:
    cfg.validate()
    stages = []
    last = cfg.num_stages - 1
    for s in range(cfg.num_stages):
        n, c = cfg.stage_side(s), cfg.channels[s]
        cm = CostModel(n, n, n, c, cfg.stage_window(s), cfg.mlp_ratio)
        nblocks = cfg.blocks[s] * (1 if s == last else 2)
        stages.append(StageCost(s + 1, n, c, cm.M, nblocks, flops_attention(cm, "w-msa"),
                                flops_attention(cm, "pure-msa"), flops_mixing(cm, "a-mlp"),
                                flops_mixing(cm, "d-mlp"), flops_block(cm)))
    return CostReport(stages, count_params(cfg))


# ---------------------------------------------------------------------------
# parameter algebra
# ---------------------------------------------------------------------------

def _linear(i: int, o: int) -> int:
    return i * o + o


def _attention(c: int, heads: int, m: int, fused_qkv: bool = True) -> int:
    return (_linear(c, 3 * c) if fused_qkv else 0) + _linear(c, c) + (2 * m - 1) ** 2 * heads


def _unit(c: int, heads: int, m: int, ratio: int, t: BlockToggles, reduction: int) -> int:
    hidden = max(1, c // reduction)
    n = 2 * c + _attention(c, heads, m) + 25 * c + c + 2 * c + _linear(c, ratio * c) + _linear(ratio * c, c)
    if t.ases_spatial:
        n += 3 * 3 * 2 * 1 + 1
    if t.ases_channel:
        n += _linear(c, hidden) + _linear(hidden, c)
    return n


def block_params(side: int, c: int, heads: int, m: int, ratio: int, t: BlockToggles, reduction: int = 4) -> int:
    n = 2 * _unit(c, heads, m, ratio, t, reduction)
    if t.mixing == "axial":
        n += _linear(side, side) + _linear(c, c) + _linear(3 * c, c)
    elif t.mixing == "dense":
        n += _linear(side * c, side * c) + _linear(2 * c, c)
    if t.mixing != "none" and t.ape_s:
        n += side * c
    if not t.single_view:
        n += 2 * 3 * c + _linear(3 * c, c) + (3 * c if t.ape_v else 0)
    return n


def skip_params(kind: str, c: int, heads: int, m: int) -> int:
    if kind == "crossmerge":
        return _attention(c, heads, m) + _linear(c, 2 * c)
    if kind == "catlinear":
        return _linear(2 * c, c)
    if kind == "catskip":
        return _attention(c, heads, m) + _linear(2 * c, c)
    if kind == "crossskip":
        return _attention(c, heads, m)
    if kind == "catcrossskip":
        return _attention(c, heads, m, fused_qkv=False) + _linear(c, c) + _linear(2 * c, 2 * c)
    raise ValueError(f"unknown skip kind {kind!r}")


def count_params(cfg: PyramidConfig) -> "OrderedDict[str, int]":
    """Parameter count per top-level component path, from the config alone."""
    cfg.validate()
    t = cfg.toggles
    c1, ci, co = cfg.channels[0], cfg.in_channels, cfg.out_channels
    groups: OrderedDict[str, int] = OrderedDict()
    half = c1 // 2
    groups["stem"] = 27 * ci * half + 2 * half + 27 * half * c1 + 2 * c1
    n = cfg.num_stages
    for s in range(n):
        per = block_params(cfg.stage_side(s), cfg.channels[s], cfg.heads[s], cfg.stage_window(s),
                           cfg.mlp_ratio, t, cfg.reduction)
        for j in range(cfg.blocks[s]):
            groups[f"encoder.{s}.blocks.{j}"] = per
    for s in range(n - 1):
        c = cfg.channels[s]
        groups[f"down.{s}"] = 27 * c * 2 * c + 2 * c
    for s in range(n - 1):
        c = cfg.channels[s + 1]
        groups[f"up.{s}"] = c * 8 * (c // 2) + c // 2
    for s in range(n - 1):
        groups[f"skips.{s}"] = skip_params(cfg.skip, cfg.channels[s], cfg.heads[s], cfg.stage_window(s))
    for s in range(n - 1):
        per = block_params(cfg.stage_side(s), cfg.channels[s], cfg.heads[s], cfg.stage_window(s),
                           cfg.mlp_ratio, t, cfg.reduction)
        for j in range(cfg.blocks[s]):
            groups[f"decoder.{s}.blocks.{j}"] = per
    groups["head"] = (c1 * 8 * half + half) + (half * 8 * (c1 // 4) + c1 // 4) \
        + (27 * ci * (c1 // 4) + c1 // 4) + _linear(c1 // 4, co)
    return groups


def instantiated_params(model, groups) -> "OrderedDict[str, int]":
    counts: OrderedDict[str, int] = OrderedDict((g, 0) for g in groups)
    unmatched = 0
    for name, p in model.named_parameters():
        for g in groups:
            if name == g or name.startswith(g + "."):
                counts[g] += p.size
                break
        else:
            unmatched += p.size
    if unmatched:
        counts["<unmatched>"] = unmatched
    return counts


@dataclass
class AuditResult:
    analytic: int
    instantiated: int
    mismatches: list

    @property
    def ok(self) -> bool:
        return not self.mismatches and self.analytic == self.instantiated


def audit(model) -> AuditResult:
    analytic = count_params(model.config)
    actual = instantiated_params(model, analytic)
    keys = list(analytic) + [k for k in actual if k not in analytic]
    bad = [(k, analytic.get(k, 0), actual.get(k, 0)) for k in keys if analytic.get(k, 0) != actual.get(k, 0)]
    return AuditResult(sum(analytic.values()), model.num_parameters(), bad)

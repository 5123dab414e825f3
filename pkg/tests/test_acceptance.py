"""One test per acceptance criterion; each records a PASS/FAIL summary line."""

import dataclasses
import itertools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES

from shufflemixer.attention import (WindowAttention, WindowGrid, rotation_restore, transpose_shuffle, w_msa,
                                    window_partition, window_reverse)
from shufflemixer.block import ABLATIONS, ASES_MODES, rearrange_views, restore_views
from shufflemixer.complexity import CostModel, audit, flops_attention, flops_mixing
from shufflemixer.config import RunConfig
from shufflemixer.gradcheck import audit_network, audit_primitives
from shufflemixer.io import load_checkpoint, save_checkpoint
from shufflemixer.metrics import dice, doc, hd95, jaccard
from shufflemixer.network import DESK_CONFIG, DEFAULT_CONFIG, SKIP_KINDS, TINY_CONFIG, build_model
from shufflemixer.nn import Init
from shufflemixer.tensor import Tensor, no_grad
from shufflemixer.train import train

from test_attention import brute_force_attention
from test_metrics import brute_hd95


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n} {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_1_round_trips():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    checked, ok = [], True
    for cfg in (DEFAULT_CONFIG, DESK_CONFIG):
        for s in range(len(cfg.channels)):
            side, m = cfg.stage_side(s), cfg.stage_window(s)
            x = rng.standard_normal((1, side, side, side, 3)).astype(np.float32)
            vol = Tensor(x)
            views = rearrange_views(vol)
            ok &= all(np.array_equal(v.data, x) for v in restore_views(views))
            slices = Tensor(views.data.reshape(-1, side, side, 3))
            ok &= np.array_equal(rotation_restore(transpose_shuffle(slices, m), m).data, slices.data)
            ok &= np.array_equal(transpose_shuffle(rotation_restore(slices, m), m).data, slices.data)
            back = window_reverse(window_partition(slices, m), WindowGrid(side, side, m))
            ok &= np.array_equal(back.data, slices.data)
            checked.append(f"{side}/{m}")
    seconds = time.perf_counter() - t0
    record(1, bool(ok) and seconds < 1.0,
           f"bit-exact at side/window {' '.join(checked)} in {seconds:.3f}s (< 1s)")


def test_criterion_2_attention_oracle():
    rng = np.random.default_rng(1)
    errors = {}
    for dtype in (np.float32, np.float64):
        attn = WindowAttention(Init(3, dtype=dtype), 8, 2, 4)
        for p in attn.parameters():
            p.data[...] = (rng.standard_normal(p.shape) * 0.5).astype(dtype)
        tokens = rng.standard_normal((16, 8)).astype(dtype)
        with no_grad():
            got = w_msa(Tensor(tokens.reshape(1, 4, 4, 8), dtype=dtype), attn).data.reshape(16, 8)
        errors[dtype] = np.abs(got - brute_force_attention(tokens.astype(np.float64), attn)).max()
    record(2, errors[np.float32] < 1e-5 and errors[np.float64] < 1e-10,
           f"16 tokens: f32 {errors[np.float32]:.2e} (< 1e-5), f64 {errors[np.float64]:.2e} (< 1e-10)")


@pytest.mark.slow
def test_criterion_3_gradients():
    prim = max(r.max_rel_error for r in audit_primitives())
    net = audit_network(TINY_CONFIG, samples=200)
    bad = net.failures(1e-4)
    params = len(net.checked)
    record(3, prim < 1e-6 and not bad and params >= 200 and net.seconds <= 600,
           f"primitives {prim:.2e} (< 1e-6); network 16^3 {params} parameter sites, max {net.max_rel_error:.2e}, "
           f"{len(bad)} failures (< 1e-4) in {net.seconds:.0f}s")


def test_criterion_4_flops():
    values = (flops_attention(CostModel(8, 8, 8, 4, 4), "w-msa"),
              flops_attention(CostModel(8, 8, 8, 4, 4), "pure-msa"),
              flops_mixing(CostModel(4, 4, 4, 2, 4, alpha=4), "a-mlp"),
              flops_mixing(CostModel(4, 4, 4, 2, 4, alpha=4), "d-mlp"))
    rng = np.random.default_rng(4)
    ordered = 0
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(1, 33, 2))
        cm = CostModel(h, w, int(rng.integers(1, 33)), int(rng.integers(1, 129)),
                       int(rng.integers(1, min(h, w) + 1)), int(rng.integers(1, 9)))
        attn_ok = (flops_attention(cm, "w-msa") < flops_attention(cm, "pure-msa")) == (cm.M ** 2 < cm.H * cm.W)
        mix_ok = (flops_mixing(cm, "a-mlp") < flops_mixing(cm, "d-mlp")) == (cm.D + cm.C < cm.D * cm.C)
        ordered += attn_ok and mix_ok
    record(4, values == (12288, 36864, 7680, 9728) and ordered == 100,
           f"values {values}; orderings hold on {ordered}/100 random cost models")


def test_criterion_5_parameter_audit():
    rows = []
    for name, cfg in (("default", DEFAULT_CONFIG), ("desk", DESK_CONFIG)):
        for ases in ("on", "off"):
            r = audit(build_model(dataclasses.replace(cfg, ases=ases)))
            rows.append((f"{name}/ases-{ases}", r.ok, r.analytic, r.instantiated))
    record(5, all(ok and a == b for _, ok, a, b in rows),
           "; ".join(f"{n} {a}={b}" for n, _, a, b in rows))


def test_criterion_6_metric_oracles():
    pred = np.array([[1, 1], [1, 0]], bool)[..., None]
    gt = np.array([[0, 1], [1, 1]], bool)[..., None]
    d, j = dice(pred, gt), jaccard(pred, gt)
    m1 = np.array([1, 0, 0, 0, 0], bool)
    m2 = np.array([1, 1, 1, 0, 0], bool)
    p = np.array([1, 1, 0, 0, 0], bool)
    doc_same, doc_toy = doc(m1, m1, m2), doc(p, m1, m2)
    a = np.zeros((6, 6, 6), bool)
    a[1:4, 1:4, 1:4] = True
    b = np.roll(a, 1, axis=2)
    hd_err = abs(hd95(a, b) - brute_hd95(a, b))
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 9, 3))
        x, y = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        jj = jaccard(x, y)
        worst = max(worst, abs(dice(x, y) - 2 * jj / (1 + jj)))
    ok = (abs(d - 2 / 3) < 1e-15 and j == 0.5 and doc_same == 0.0 and doc_toy == 0.5
          and hd_err < 1e-9 and worst < 1e-12)
    record(6, ok, f"dice {d:.6f} jaccard {j}; doc {doc_same} / {doc_toy}; hd95 err {hd_err:.1e}; "
                  f"dice-jaccard identity {worst:.1e} over 1000 pairs")


@pytest.mark.slow
def test_criterion_7_desk_training():
    run = RunConfig(preset="desk", steps=300, seed=0)
    t0 = time.perf_counter()
    first = train(run, log=lambda _: None, max_dice_stop=0.95)
    second = train(run, log=lambda _: None, max_dice_stop=0.95)
    seconds = time.perf_counter() - t0
    same = first.losses == second.losses
    record(7, first.best_dice >= 0.95 and first.best_step < 300 and same and first.seconds <= 900,
           f"dice {first.best_dice:.4f} at step {first.best_step} in {first.seconds:.0f}s; "
           f"second run identical losses: {same} ({len(first.losses)} steps, both runs {seconds:.0f}s)")


@pytest.mark.slow
def test_criterion_8_ablation_matrix():
    failures = []
    combos = list(itertools.product(ASES_MODES, SKIP_KINDS, ABLATIONS))
    t0 = time.perf_counter()
    for ases, skip, ablate in combos:
        run = RunConfig(preset="tiny", ases=ases, skip=skip, ablate=ablate, steps=10, batch_size=2,
                        num_volumes=2, eval_every=10)
        try:
            r = train(run, log=lambda _: None)
            if len(r.losses) != 10 or not np.isfinite(r.losses).all():
                failures.append((ases, skip, ablate))
        except Exception as err:  # noqa: BLE001
            failures.append((ases, skip, ablate, repr(err)))
    record(8, not failures and len(combos) == 140,
           f"{len(combos) - len(failures)}/{len(combos)} combinations ran 10 steps "
           f"({len(ASES_MODES)} ases x {len(SKIP_KINDS)} skips x {len(ABLATIONS)} ablations) "
           f"in {time.perf_counter() - t0:.0f}s")


def test_criterion_9_checkpoint(tmp_path):
    run = RunConfig(preset="desk", steps=2, batch_size=2, num_volumes=2, eval_every=2)
    model = train(run, log=lambda _: None).model
    save_checkpoint(tmp_path / "m.smck", model)
    fresh = build_model(run.pyramid(), seed=99)
    load_checkpoint(tmp_path / "m.smck", fresh)
    x = Tensor(np.random.default_rng(9).standard_normal((1, 32, 32, 32, 1)).astype(np.float32))
    model.eval()
    fresh.eval()
    with no_grad():
        a, b = model(x).data, fresh(x).data
    record(9, np.array_equal(a, b) and a.tobytes() == b.tobytes(),
           f"desk forward after save/load bitwise equal: {a.tobytes() == b.tobytes()}")

"""Command line entry point: ``shufflemixer {train,eval,gradcheck,analyze,synth}``.

Every command prints ``key=value`` records on stdout.  Exit codes:
0 ok, 2 configuration error, 3 numeric failure, 4 audit failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .block import ABLATIONS, ASES_MODES
from .config import PRESETS, RunConfig, load_config
from .network import SKIP_KINDS, ConfigError, build_model
from .tensor import NonFiniteError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_AUDIT = 0, 2, 3, 4


class AuditFailure(RuntimeError):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="plain-text key = value run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="model size preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--ablate", choices=ABLATIONS)
    p.add_argument("--skip", choices=SKIP_KINDS)
    p.add_argument("--ases", choices=ASES_MODES)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="shufflemixer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train on the synthetic task")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, help="defaults to OUT/best.smck")
    p.add_argument("--data", type=Path, help="directory written by `synth`; default: regenerate from the config")
    p.add_argument("--spacing", type=float, default=1.0)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit (64-bit)")
    p.add_argument("--tolerance", type=float, default=1e-4, help="whole-network tolerance")
    p.add_argument("--primitive-tolerance", type=float, default=1e-6)
    p.add_argument("--samples", type=int, default=200)

    sub.add_parser("analyze", parents=[common], help="FLOP report and parameter audit")
    sub.add_parser("synth", parents=[common], help="write the synthetic dataset as volume files")
    return parser


def _run_config(args) -> RunConfig:
    overrides = dict(preset=args.preset, seed=args.seed, precision=args.precision, ablate=args.ablate,
                     skip=args.skip, ases=args.ases, out_dir=str(args.out) if args.out else None)
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    return load_config(args.config, **overrides)


def _emit(lines, sink=None) -> None:
    for line in lines:
        print(line, flush=True)
        if sink is not None:
            sink.write(line + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .train import train

    run = _run_config(args)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.to_text())
    with open(out / "log.txt", "w") as log:
        result = train(run, log=lambda line: _emit([line], log), out_dir=out)
        _emit([f"best_dice={result.best_dice:.6f}", f"best_step={result.best_step}",
               f"final_loss={result.losses[-1]:.9e}", f"seconds={result.seconds:.1f}"], log)
    return EXIT_OK


def _load_cases(args, run: RunConfig):
    from .data import synth_dataset
    from .io import read_volume

    if args.data is None:
        cases = synth_dataset(run.synth(), run.seed)
        return [v for v, _ in cases], [lab for _, lab in cases]
    images = sorted(Path(args.data).glob("case_*_image.smvx"))
    if not images:
        raise ConfigError(f"no case_*_image.smvx files in {args.data}")
    vols = [read_volume(p) for p in images]
    labels = [read_volume(Path(str(p).replace("_image.smvx", "_label.smvx"))) for p in images]
    return vols, labels


def cmd_eval(args) -> int:
    from .io import load_checkpoint
    from .metrics import case_metrics
    from .train import DTYPES, predict

    run = _run_config(args)
    cfg = run.pyramid()
    model = build_model(cfg, run.seed, dtype=DTYPES[run.precision])
    ckpt = args.checkpoint or Path(run.out_dir) / "best.smck"
    load_checkpoint(ckpt, model)
    vols, labels = _load_cases(args, run)
    expected = (cfg.input_size,) * 3 + (cfg.in_channels,)
    for v in vols:
        if v.shape != expected:
            raise ShapeError(f"volume shape {v.shape} does not match the model input {expected}")
    pred = predict(model, np.stack(vols).astype(DTYPES[run.precision]), run.batch_size)
    keys = ("dice", "jaccard", "precision", "recall", "hd95")
    rows, totals = [], {}
    for i, lab in enumerate(labels):
        if lab.shape != pred[i].shape:
            raise ShapeError(f"label shape {lab.shape} does not match prediction {pred[i].shape}")
        for k in range(1, cfg.out_channels):
            m = case_metrics(pred[i] == k, lab == k, args.spacing)
            rows.append((i, k, m))
            _emit([f"case={i} class={k} " + " ".join(f"{key}={m[key]:.6f}" for key in keys)])
            for key in keys:
                totals.setdefault(key, []).append(m[key])
    _emit([f"mean.{key}={np.nanmean(vals):.6f}" for key, vals in totals.items()])
    print(f"\n{'case':>4} {'class':>5} " + " ".join(f"{k:>9}" for k in keys))
    for i, k, m in rows:
        print(f"{i:>4} {k:>5} " + " ".join(f"{m[key]:>9.4f}" for key in keys))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import audit_network, audit_primitives

    run = _run_config(args)
    bad = []
    for r in audit_primitives(seed=run.seed):
        _emit([f"site={r.name} checked={r.checked} max_rel_error={r.max_rel_error:.3e}"])
        if not r.ok(args.primitive_tolerance):
            bad.append(r.name)
    cfg = PRESETS["tiny"] if args.preset is None and args.config is None else run.pyramid()
    audit = audit_network(cfg, samples=args.samples, seed=run.seed)
    for s in audit.sites:
        _emit([f"site={s.name}{list(s.index)} analytic={s.analytic:.9e} numeric={s.numeric:.9e} "
               f"rel_error={s.rel_error:.3e} structural_zero={int(s.structural_zero)}"])
    bad += [f"{s.name}{list(s.index)}" for s in audit.failures(args.tolerance)]
    _emit([f"network.sites={len(audit.sites)}", f"network.checked={len(audit.checked)}",
           f"network.max_rel_error={audit.max_rel_error:.3e}",
           f"network.seconds={audit.seconds:.1f}", f"failures={len(bad)}"])
    if bad:
        raise AuditFailure("gradient audit failed at: " + ", ".join(bad))
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .complexity import audit, cost_report

    run = _run_config(args)
    cfg = run.pyramid()
    report = cost_report(cfg)
    result = audit(build_model(cfg, run.seed))
    records = report.to_records() + [f"audit.analytic={result.analytic}", f"audit.instantiated={result.instantiated}",
                                     f"audit.ok={int(result.ok)}"]
    records += [f"audit.mismatch={path}:{a}!={b}" for path, a, b in result.mismatches]
    _emit(records)
    print()
    print(report.to_text())
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "analyze.txt").write_text("\n".join(records) + "\n\n" + report.to_text() + "\n")
    if not result.ok:
        raise AuditFailure("analytic and instantiated parameter counts differ")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import synth_dataset
    from .io import write_volume

    run = _run_config(args)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (vol, lab) in enumerate(synth_dataset(run.synth(), run.seed)):
        write_volume(out / f"case_{i:03d}_image.smvx", vol)
        write_volume(out / f"case_{i:03d}_label.smvx", lab)
        _emit([f"case={i} foreground_voxels={int(np.count_nonzero(lab))}"])
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "analyze": cmd_analyze, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ShapeError, FileNotFoundError, ValueError) as err:
        if isinstance(err, NonFiniteError):
            raise
        print(f"error={err}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as err:
        print(f"error={err}", file=sys.stderr)
        return EXIT_NUMERIC
    except AuditFailure as err:
        print(f"error={err}", file=sys.stderr)
        return EXIT_AUDIT


if __name__ == "__main__":
    sys.exit(main())

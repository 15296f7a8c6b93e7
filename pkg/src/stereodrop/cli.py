"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import checks
from . import diffcore as dc
from .checkpoint import Checkpoint, CheckpointError
from .container import SampleFormatError, list_sample_dirs, read_arrays, write_arrays
from .encoder import ShapeError
from .metrics import EvalReport, evaluate_pair
from .model import VARIANTS
from .synthgen import DROP_MODES, generate_dataset
from .trainer import (TrainConfig, TrainingDiverged, disparity_to_pixels, evaluate_model, infer, input_report,
                      load_samples, read_config, restore, train)

log = logging.getLogger("stereodrop")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    """One override flag per TrainConfig field; unset flags leave the config file value alone."""
    for f in dataclasses.fields(TrainConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f"cfg_{f.name}", nargs="?", const="true", default=None, metavar="BOOL")
        else:
            p.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar=f.name.upper())


def _config_from_args(args) -> TrainConfig:
    mapping = read_config(args.config) if getattr(args, "config", None) else {}
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        return TrainConfig.from_mapping(mapping, **overrides)
    except KeyError as exc:
        raise UsageError(f"config: {exc.args[0]}") from None
    except ShapeError:
        raise
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stereodrop", description="Stereo waterdrop removal with row-wise dilated attention.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic stereo waterdrop dataset")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--per-scene", type=int, default=1)
    g.add_argument("--mode", choices=DROP_MODES, default="mixed")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=96)
    g.add_argument("--height", type=int, default=48)
    g.add_argument("--disparity", default="2,10", help="integer layer disparity range LO,HI in pixels")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model; writes checkpoint, metrics CSV and loss curve")
    t.add_argument("--config", help="key = value run config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="metrics CSV (default: next to the checkpoint)")
    _add_config_flags(t)

    i = sub.add_parser("infer", help="restore a sample or a directory of samples")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--sample", required=True, help="sample directory or a root holding several")
    i.add_argument("--out", required=True)
    i.add_argument("--no-png", action="store_true", help="skip the 8-bit image files")

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True, help="report CSV; a PNG is written alongside")
    e.add_argument("--pred-field", default="O", help="array prefix holding predictions (default O)")

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--module", choices=sorted(checks.MODULE_TARGETS) + sorted(checks.TARGETS))
    c.add_argument("--seed", type=int, default=0, help="first seed")
    c.add_argument("--seeds", type=int, default=checks.DEFAULT_SEEDS, help="number of seeds per target")

    a = sub.add_parser("ablate", help="train several variants and compare them")
    a.add_argument("--variants", required=True, help=f"comma list from {','.join(VARIANTS)}")
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data", help="held-out samples (default: the training data)")
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", default="0", help="comma list of training seeds")
    a.add_argument("--config")
    _add_config_flags(a, skip=("variant", "data", "seed"))
    return p


# --- subcommands ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.scenes < 1 or args.per_scene < 1:
        raise UsageError("--scenes and --per-scene must be positive")
    try:
        lo, hi = (int(v) for v in args.disparity.split(","))
        paths = generate_dataset(args.out, args.scenes, args.per_scene, args.mode, args.seed,
                                 width=args.width, height=args.height, disparity_range=(lo, hi))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {len(paths)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.data:
        raise UsageError("train needs --data (or data = ... in the config)")
    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out.with_name(out.stem + "_metrics.csv")
    from .plotting import plot_loss_curve
    try:
        res = train(cfg, out=out, metrics_path=metrics)
    finally:
        if metrics.exists():
            _plot_metrics_file(metrics, plot_loss_curve)
    last = res.history[-1]
    print(f"trained {cfg.variant}: {len(res.history)} steps, final loss_p {last['loss_p']:.5f} -> {out}")
    return EXIT_OK


def _plot_metrics_file(metrics: Path, plotter) -> None:
    with open(metrics, newline="") as fh:
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    if rows:
        plotter(rows, metrics.with_suffix(".png"))


def _to_png(img: np.ndarray, path: Path) -> None:
    arr = np.clip(np.asarray(img), 0, 1)
    if arr.shape[0] == 1:
        pil = Image.fromarray(np.round(arr[0] * 255).astype(np.uint8), mode="L")
    else:
        pil = Image.fromarray(np.round(np.transpose(arr, (1, 2, 0)) * 255).astype(np.uint8), mode="RGB")
    pil.save(path)


def cmd_infer(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model, _, cfg = restore(ckpt)
    dirs = list_sample_dirs(args.sample)
    if not dirs:
        raise SampleFormatError(f"{args.sample}: no sample directories")
    out_root = Path(args.out)
    for d in dirs:
        meta, arrays = read_arrays(d, ["I_l", "I_r"])
        o_l, o_r, d_l, d_r = infer(model, arrays["I_l"], arrays["I_r"], expect_dims=(cfg.height, cfg.width))
        target = out_root if len(dirs) == 1 and d == Path(args.sample) else out_root / d.name
        px_l, px_r = disparity_to_pixels(d_l), disparity_to_pixels(d_r)
        write_arrays(target, {"O_l": o_l, "O_r": o_r, "D_l": px_l, "D_r": px_r},
                     {"source": d.name, "variant": cfg.variant})
        if not args.no_png:
            _to_png(o_l, target / "O_l.png")
            _to_png(o_r, target / "O_r.png")
            scale = max(float(px_l.max()), float(px_r.max()), 1e-6)
            _to_png(px_l / scale, target / "D_l.png")
            _to_png(px_r / scale, target / "D_r.png")
    print(f"restored {len(dirs)} samples into {out_root}")
    return EXIT_OK


def _index(root) -> dict[str, Path]:
    return {d.name: d for d in list_sample_dirs(root)}


def cmd_eval(args) -> int:
    from .plotting import plot_eval_report
    pred, gt = _index(args.pred), _index(args.gt)
    if len(pred) == 1 and len(gt) == 1:
        pairs = [(next(iter(gt)), next(iter(pred.values())), next(iter(gt.values())))]
    else:
        missing = sorted(set(gt) - set(pred))
        if missing:
            raise SampleFormatError(f"no predictions for {len(missing)} samples, e.g. {missing[0]}")
        pairs = [(n, pred[n], gt[n]) for n in sorted(gt)]
    if not pairs:
        raise SampleFormatError(f"{args.gt}: no ground-truth samples")
    f = args.pred_field
    report, baseline = EvalReport(variant="prediction"), EvalReport(variant="input")
    started = time.time()
    for name, pdir, gdir in pairs:
        _, p = read_arrays(pdir, [f"{f}_l", f"{f}_r"])
        gmeta, g = read_arrays(gdir, None)
        report.rows.append(evaluate_pair(p[f"{f}_l"], p[f"{f}_r"], g["O_l"], g["O_r"], name))
        if "I_l" in g:
            baseline.rows.append(evaluate_pair(g["I_l"], g["I_r"], g["O_l"], g["O_r"], name))
    report.runtime = time.time() - started
    path = report.write_csv(args.report)
    plot_eval_report(report, path.with_suffix(".png"), baseline if baseline.rows else None)
    agg = report.aggregate()
    print(f"{len(report.rows)} samples: PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f} "
          f"(l {agg['psnr_l']:.3f} / r {agg['psnr_r']:.3f}) -> {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    if args.module is None:
        targets = list(checks.TARGETS)
    elif args.module in checks.MODULE_TARGETS:
        targets = checks.MODULE_TARGETS[args.module]
    else:
        targets = [args.module]
    summary = checks.run_checks(targets, seeds=args.seeds, base_seed=args.seed)
    by_name: dict[str, list] = {}
    for r in summary.results:
        by_name.setdefault(r.name, []).append(r)
    for name, results in by_name.items():
        worst = max(r.max_error if r.failed_node is None else float("inf") for r in results)
        ok = all(r.passed for r in results)
        extra = ""
        failed = [r for r in results if r.failed_node]
        if failed:
            extra = f"  non-finite at {failed[0].failed_node}"
        skipped = sum(r.skipped for r in results)
        if skipped:
            extra += f"  ({skipped} elements on kinks skipped)"
        print(f"{'PASS' if ok else 'FAIL'}  {name:28s} max rel err {worst:.2e} over {len(results)} seeds{extra}")
    print("all gradients within 1e-4" if summary.passed else "gradient check FAILED")
    return EXIT_OK if summary.passed else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [n for n in names if n.lower().removeprefix("ours-") not in VARIANTS]
    if unknown or not names:
        raise UsageError(f"unknown variants {unknown}; choose from {', '.join(VARIANTS)}")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be a comma list of integers, got {args.seeds!r}") from None
    base = _config_from_args(args)
    train_set = load_samples(args.data, base)
    eval_root = args.eval_data or args.data
    eval_set = load_samples(eval_root, base)
    eval_names = [d.name for d in list_sample_dirs(eval_root)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    baseline = input_report(eval_set, eval_names)
    runs = []
    for name in names:
        for seed in seeds:
            cfg = dataclasses.replace(base, variant=name, seed=seed, data=str(args.data))
            started = time.time()
            res = train(cfg, train_set, out / f"{name}_s{seed}.ckpt", out / f"{name}_s{seed}_metrics.csv")
            report = evaluate_model(res.model, eval_set, eval_names)
            report.write_csv(out / f"{name}_s{seed}_eval.csv")
            runs.append({"variant": name, "seed": seed, "psnr": report.mean_psnr, "ssim": report.mean_ssim,
                         "loss_p": res.history[-1]["loss_p"], "seconds": time.time() - started})
            log.info("%s seed %d: PSNR %.3f", name, seed, report.mean_psnr)
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(runs[0]))
        w.writeheader()
        for r in runs:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    summary = {n: [r["psnr"] for r in runs if r["variant"] == n] for n in names}
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant", "psnr", "ssim", "psnr_std", "seeds"))
        w.writerow(("input", repr(baseline.mean_psnr), repr(baseline.mean_ssim), "0.0", 0))
        for n in names:
            ps = summary[n]
            ss = [r["ssim"] for r in runs if r["variant"] == n]
            w.writerow((n, repr(float(np.mean(ps))), repr(float(np.mean(ss))), repr(float(np.std(ps))), len(ps)))
    plot_ablation(summary, out / "ablation.png")
    for n in names:
        print(f"{n:8s} PSNR {np.mean(summary[n]):.3f} dB over {len(summary[n])} seeds")
    print(f"input    PSNR {baseline.mean_psnr:.3f} dB")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"stereodrop: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dc.NonFiniteError, TrainingDiverged) as exc:
        print(f"stereodrop: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SampleFormatError, CheckpointError, ShapeError, FileNotFoundError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"stereodrop: data error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

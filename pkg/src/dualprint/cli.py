"""Command-line entry point.

Every subcommand writes its outputs (and a copy of the resolved config)
under --out, so a run can be reproduced from its artifacts alone.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import bench as bench_mod
from . import experiments
from .data import SynthParams, generate_dataset, read_minutiae
from .errors import ConfigError, DataError, DualPrintError, NumericalError
from .matching import analyze_image, match_templates, read_template
from .metrics import export_embeddings, export_histogram
from .nets import DualHeadConfig, count_params, get_backbone
from .patches import extract_all_patches
from .training import LossWeights, SuppressionFlags, TrainConfig


def _add_out(parser):
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--force", action="store_true",
                        help="allow writing into a non-empty output directory")


def _add_config(parser):
    parser.add_argument("--config", help="JSON file of ExperimentConfig fields")
    parser.add_argument("--variant", help="backbone variant name")
    parser.add_argument("--split-point", type=int)
    parser.add_argument("--descriptor-dim", type=int)
    parser.add_argument("--w-sd", type=float, help="spoof loss weight")
    parser.add_argument("--w-m", type=float, help="matching loss weight")
    parser.add_argument("--s-sd", type=float, help="spoof gradient scale")
    parser.add_argument("--s-m", type=float, help="matching gradient scale")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--max-epochs", type=int)
    parser.add_argument("--plateau-patience", type=int)
    parser.add_argument("--minutiae-cap", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--teacher-seed", type=int)
    parser.add_argument("--far-targets", type=float, nargs="+")


def _experiment_config(args) -> experiments.ExperimentConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")

    def override(section, key, value):
        if value is not None:
            raw.setdefault(section, {})[key] = value

    for name in ("variant", "split_point", "descriptor_dim", "teacher_seed"):
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    if getattr(args, "far_targets", None):
        raw["far_targets"] = list(args.far_targets)
    override("weights", "w_sd", getattr(args, "w_sd", None))
    override("weights", "w_m", getattr(args, "w_m", None))
    override("flags", "s_sd", getattr(args, "s_sd", None))
    override("flags", "s_m", getattr(args, "s_m", None))
    override("train", "initial_lr", getattr(args, "lr", None))
    for name in ("batch_size", "max_epochs", "plateau_patience",
                 "minutiae_cap", "seed"):
        override("train", name, getattr(args, name, None))

    try:
        return experiments.ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def _cmd_synth(args):
    out_dir = experiments.prepare_out_dir(args.out, args.force)
    params = SynthParams(identity_seed=0, image_size=args.image_size,
                         n_minutiae=args.n_minutiae)
    manifest = generate_dataset(out_dir, args.n_fingers, args.n_impressions,
                                spoof_ratio=args.spoof_ratio, seed=args.seed,
                                test_finger_fraction=args.test_fraction,
                                val_fraction=args.val_fraction, params=params)
    print(f"wrote {len(manifest.records)} images under {out_dir}")
    return 0


def _cmd_patches(args):
    from PIL import Image as PILImage

    from .data import read_image_pixels

    out_dir = experiments.prepare_out_dir(args.out, args.force)
    pixels = read_image_pixels(args.image)
    minutiae = read_minutiae(args.minutiae)
    patches = extract_all_patches(pixels, minutiae, cap=args.cap,
                                  out_size=args.out_size)
    for k, patch in enumerate(patches):
        arr = (patch.pixels * 255.0).round().clip(0, 255).astype("uint8")
        PILImage.fromarray(arr, mode="L").save(out_dir / f"patch_{k:03d}.png")
    print(f"wrote {len(patches)} patches under {out_dir}")
    return 0


def _cmd_train(args):
    cfg = _experiment_config(args)
    manifest = experiments.resolve_manifest(args.manifest)
    _, history = experiments.run_training(manifest, cfg, args.out,
                                          force=args.force)
    final = history[-1]
    print(f"trained {cfg.variant} split {cfg.split_point}: "
          f"{len(history)} epochs, final val total {final.val_total:.6f}")
    return 0


def _cmd_eval_spoof(args):
    cfg = _experiment_config(args)
    model = experiments.load_run_model(args.model_dir)
    manifest = experiments.resolve_manifest(args.manifest)
    out_dir = experiments.prepare_out_dir(args.out, args.force)
    experiments.write_run_config(out_dir, cfg)
    from .metrics import evaluate_pad
    threshold = 0.5 if args.threshold is None else args.threshold
    report, scores = evaluate_pad(model, manifest, split=args.split,
                                  threshold=threshold,
                                  cap=cfg.train.minutiae_cap)
    report.write(out_dir / "pad_report.json")
    if args.histogram_bins:
        export_histogram(scores, args.histogram_bins,
                         out_dir / "pad_histogram.csv")
    print(f"APCER {report.apcer:.3f}%  BPCER {report.bpcer:.3f}%  "
          f"ACER {report.acer:.3f}%")
    return 0


def _cmd_eval_match(args):
    cfg = _experiment_config(args)
    model = experiments.load_run_model(args.model_dir)
    manifest = experiments.resolve_manifest(args.manifest)
    report, scores = experiments.run_match_eval(model, manifest, cfg, args.out,
                                                force=args.force,
                                                split=args.split)
    if args.histogram_bins:
        export_histogram(scores, args.histogram_bins,
                         Path(args.out) / "match_histogram.csv")
    parts = [f"FRR@FAR<={t}%: {v:.3f}%" for t, v in report.frr_at_far.items()]
    print(f"genuine {report.counts['genuine_pairs']}  "
          f"imposter {report.counts['imposter_pairs']}  " + "  ".join(parts))
    return 0


def _cmd_bench(args):
    if getattr(args, "variant_alias", None) and args.variant is None:
        args.variant = args.variant_alias
    if getattr(args, "split_alias", None) is not None and args.split_point is None:
        args.split_point = args.split_alias
    cfg = _experiment_config(args)
    out_dir = experiments.prepare_out_dir(args.out, args.force)
    experiments.write_run_config(out_dir, cfg)
    workload = bench_mod.Workload(n_images=args.n_images,
                                  minutiae_per_image=args.minutiae_per_image,
                                  repetitions=args.repetitions,
                                  seed=cfg.train.seed)
    report = bench_mod.run_benchmark(cfg.model_spec(), cfg.model_config(),
                                     workload, seed=cfg.train.seed,
                                     threads=args.threads)
    bench_mod.emit_bench_report(report, out_dir / "bench.json")
    rel = report["relative"]
    print(f"speedup {rel['speedup_pct']:.1f}%  "
          f"param reduction {rel['param_reduction_pct']:.1f}%  "
          f"bytes reduction {rel['bytes_reduction_pct']:.1f}%")
    return 0


def _cmd_bench_kernels(args):
    out_dir = experiments.prepare_out_dir(args.out, args.force)
    report = bench_mod.bench_kernels(n_patches=args.n_patches,
                                     repetitions=args.repetitions)
    (out_dir / "kernels.json").write_text(json.dumps(report, indent=2) + "\n",
                                          encoding="utf-8")
    if "cython_speedup_x" in report:
        print(f"cython speedup {report['cython_speedup_x']:.2f}x  "
              f"max abs diff {report['max_abs_diff']:.3g}")
    else:
        print("compiled backend unavailable; numpy timings only")
    return 0


def _cmd_sweep_split(args):
    cfg = _experiment_config(args)
    manifest = experiments.resolve_manifest(args.manifest)
    splits = args.splits if args.splits else None
    rows = experiments.run_split_sweep(manifest, cfg, args.out, splits=splits,
                                       force=args.force)
    print(f"{'split':>5}  {'params':>10}  {'ACE%':>8}  {'FRR%':>8}")
    for row in rows:
        print(f"{row['split_point']:>5}  {row['params_total']:>10}  "
              f"{row['ace_pct']:>8.3f}  {row['frr_pct']:>8.3f}")
    return 0


def _cmd_suppress(args):
    cfg = _experiment_config(args)
    manifest = experiments.resolve_manifest(args.manifest)
    rows = experiments.run_suppression_grid(manifest, cfg, args.out,
                                            force=args.force)
    print(f"{'s_sd':>5}  {'s_m':>5}  {'ACE%':>8}  {'FRR%':>8}")
    for row in rows:
        print(f"{row['s_sd']:>5.0f}  {row['s_m']:>5.0f}  "
              f"{row['ace_pct']:>8.3f}  {row['frr_pct']:>8.3f}")
    return 0


def _cmd_match(args):
    cfg = _experiment_config(args)
    if args.template_a and args.template_b:
        a = read_template(args.template_a)
        b = read_template(args.template_b)
    else:
        from .data import read_image_pixels
        model = experiments.load_run_model(args.model_dir)
        a, _ = analyze_image(model, read_image_pixels(args.image_a),
                             read_minutiae(args.minutiae_a),
                             cap=cfg.train.minutiae_cap)
        b, _ = analyze_image(model, read_image_pixels(args.image_b),
                             read_minutiae(args.minutiae_b),
                             cap=cfg.train.minutiae_cap)
    result = match_templates(a, b, cfg.match)
    print(f"score {result.score:.6f}  "
          f"correspondences {len(result.correspondences)}")
    return 0


def _cmd_export_embeddings(args):
    cfg = _experiment_config(args)
    model = experiments.load_run_model(args.model_dir)
    manifest = experiments.resolve_manifest(args.manifest)
    out_dir = experiments.prepare_out_dir(args.out, args.force)
    experiments.write_run_config(out_dir, cfg)
    n = export_embeddings(model, manifest, out_dir / "embeddings.csv",
                          split=args.split, cap=cfg.train.minutiae_cap)
    print(f"wrote {n} descriptor rows")
    return 0


def _cmd_info(args):
    spec = get_backbone(args.variant)
    print(f"variant {spec.variant}  family {spec.family}  "
          f"input {spec.input_size}  blocks {spec.total_blocks}")
    for split_point in sorted(spec.valid_splits()):
        from .nets import build_model
        model = build_model(spec, DualHeadConfig(split_point=split_point))
        counts = count_params(model)
        print(f"  split {split_point}: base {counts['base']:>10,}  "
              f"sd {counts['sd_head']:>9,}  match {counts['match_head']:>9,}  "
              f"total {counts['total']:>10,}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualprint",
        description="joint fingerprint spoof detection and matching")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n-fingers", type=int, required=True)
    p.add_argument("--n-impressions", type=int, required=True)
    p.add_argument("--spoof-ratio", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--n-minutiae", type=int, default=8)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--val-fraction", type=float, default=0.2)
    _add_out(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("patches", help="dump aligned patches as PNG")
    p.add_argument("--image", required=True)
    p.add_argument("--minutiae", required=True)
    p.add_argument("--cap", type=int)
    p.add_argument("--out-size", type=int, default=224)
    _add_out(p)
    p.set_defaults(func=_cmd_patches)

    p = sub.add_parser("train", help="train a joint dual-head model")
    p.add_argument("--manifest", required=True)
    _add_config(p)
    _add_out(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-spoof", help="presentation-attack metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float)
    p.add_argument("--histogram-bins", type=int)
    _add_config(p)
    _add_out(p)
    p.set_defaults(func=_cmd_eval_spoof)

    p = sub.add_parser("eval-match", help="verification metrics (FVC pairs)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--histogram-bins", type=int)
    _add_config(p)
    _add_out(p)
    p.set_defaults(func=_cmd_eval_match)

    p = sub.add_parser("bench", help="series/parallel/joint latency")
    p.add_argument("--images", "--n-images", dest="n_images", type=int,
                   default=4)
    p.add_argument("--minutiae", "--minutiae-per-image",
                   dest="minutiae_per_image", type=int, default=49)
    p.add_argument("--reps", "--repetitions", dest="repetitions", type=int,
                   default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--spec", dest="variant_alias",
                   help="alias for --variant")
    p.add_argument("--split", dest="split_alias", type=int,
                   help="alias for --split-point")
    _add_config(p)
    _add_out(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("bench-kernels", help="compiled vs numpy patch kernels")
    p.add_argument("--n-patches", type=int, default=49)
    p.add_argument("--repetitions", type=int, default=3)
    _add_out(p)
    p.set_defaults(func=_cmd_bench_kernels)

    p = sub.add_parser("sweep-split", help="train/eval across split points")
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", type=int, nargs="+")
    _add_config(p)
    _add_out(p)
    p.set_defaults(func=_cmd_sweep_split)

    p = sub.add_parser("suppress", help="gradient suppression grid")
    p.add_argument("--manifest", required=True)
    _add_config(p)
    _add_out(p)
    p.set_defaults(func=_cmd_suppress)

    p = sub.add_parser("match", help="score one pair of fingerprints")
    p.add_argument("--model-dir")
    p.add_argument("--image-a")
    p.add_argument("--minutiae-a")
    p.add_argument("--image-b")
    p.add_argument("--minutiae-b")
    p.add_argument("--template-a")
    p.add_argument("--template-b")
    _add_config(p)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("export-embeddings", help="descriptor CSV dump")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--split")
    _add_config(p)
    _add_out(p)
    p.set_defaults(func=_cmd_export_embeddings)

    p = sub.add_parser("info", help="per-split parameter counts")
    p.add_argument("--variant", default="tiny")
    p.set_defaults(func=_cmd_info)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    except DualPrintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

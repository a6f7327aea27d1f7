"""Command-line entry point.

Subcommands: synth, train, localize, ablate, gradcheck, export-check, serve.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. A JSON config file may supply defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

MAP_KINDS = {"cam": "cam", "infocam": "infocam", "infocam+": "infocam_plus"}
HEAD_CHOICES = {"softmax": "softmax", "sigmoid": "sigmoid",
                "pc-sigmoid": "pc_sigmoid"}


class ConfigError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="infocam",
        description="Class-map localization toolkit: synthesize data, train "
                    "the minimal CNN, compute intensity maps, and evaluate "
                    "weakly supervised localization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a double-digit dataset")
    p.add_argument("--config", help="JSON file with flag defaults")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p-slot", type=float, default=0.7,
                   help="per-slot occupancy probability")
    p.add_argument("--source-count", type=int, default=4000,
                   help="procedural glyph pool size (when no IDX files)")
    p.add_argument("--mnist-dir", default=None,
                   help="directory with IDX files (train-images-idx3-ubyte, "
                        "train-labels-idx1-ubyte)")
    p.add_argument("--idx-prefix", default="train",
                   help="IDX filename prefix inside --mnist-dir")
    p.add_argument("--dump-pgm", type=int, default=0,
                   help="write the first N canvases as PGM files")

    p = sub.add_parser("train", help="train the minimal CNN on a dataset")
    p.add_argument("--config", help="JSON file with flag defaults")
    p.add_argument("--data", required=True, help="training dataset manifest")
    p.add_argument("--test", default=None, help="held-out dataset manifest")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--head", choices=sorted(HEAD_CHOICES), default="sigmoid")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--init-scale", type=float, default=2.449489742783178)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("localize", help="maps -> boxes -> metrics")
    _add_localize_flags(p)
    p.add_argument("--out", default=None, help="directory for JSON/CSV/images")
    p.add_argument("--dump-images", type=int, default=0,
                   help="write heatmap/overlay images for the first N samples")

    p = sub.add_parser("ablate", help="2x2 region/subtraction ablation")
    _add_localize_flags(p)
    p.add_argument("--out", default=None, help="directory for the ablation JSON")

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--config", help="JSON file with flag defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--head", choices=sorted(HEAD_CHOICES), default="sigmoid")
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("export-check",
                       help="validate an externally exported feature manifest")
    p.add_argument("--config", help="JSON file with flag defaults")
    p.add_argument("--manifest", required=True)
    p.add_argument("--map", choices=sorted(MAP_KINDS), default="infocam")
    p.add_argument("--region-side", type=int, default=3)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--tolerance", type=float, default=1e-3)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config", help="JSON file with flag defaults")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _add_localize_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with flag defaults")
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint directory (forward images to features)")
    p.add_argument("--data", default=None,
                   help="dataset manifest (images + labels + boxes)")
    p.add_argument("--manifest", default=None,
                   help="exported-features manifest (features + weights)")
    p.add_argument("--map", choices=sorted(MAP_KINDS), default="infocam")
    p.add_argument("--region-side", type=int, default=3)
    p.add_argument("--region-anchor", choices=["centered", "topleft"],
                   default="centered")
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--connectivity", type=int, choices=[4, 8], default=4)
    p.add_argument("--raw-threshold", dest="threshold_mode",
                   action="store_const", const="raw", default="raw",
                   help="keep cells above threshold*max of the raw map "
                        "(the default)")
    p.add_argument("--normalized-threshold", dest="threshold_mode",
                   action="store_const", const="normalized",
                   help="min-max normalize the map before thresholding")
    p.add_argument("--exclude-true-label-argmin", action="store_true",
                   help="drop the query label from the least-likely argmin")
    p.add_argument("--target-digit", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Load --config JSON as subcommand defaults; explicit flags still win."""
    if not argv or argv[0].startswith("-"):
        return argv
    if "--config" not in argv:
        return argv
    cfg_path = argv[argv.index("--config") + 1]
    try:
        cfg = json.loads(Path(cfg_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {cfg_path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    subparsers = next(
        a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
    )
    subparser = subparsers.choices.get(argv[0])
    if subparser is None:
        return argv
    known = {a.dest for a in subparser._actions}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    subparser.set_defaults(**cfg)
    return argv


def _localize_options(args) -> "LocalizeOptions":
    from .runs import LocalizeOptions

    return LocalizeOptions(
        kind=MAP_KINDS[args.map],
        region_side=args.region_side,
        region_anchor=args.region_anchor,
        threshold=args.threshold,
        connectivity=args.connectivity,
        raw_threshold=args.threshold_mode == "raw",
        exclude_true_label=args.exclude_true_label_argmin,
        target_digit=args.target_digit,
        dump_images=getattr(args, "dump_images", 0),
    )


def _load_inputs(args):
    from .arrayio import load_manifest
    from .nn import load_checkpoint

    if args.manifest:
        return load_manifest(args.manifest), None
    if not (args.checkpoint and args.data):
        raise ConfigError(
            "need either --manifest, or --checkpoint together with --data"
        )
    return load_manifest(args.data), load_checkpoint(args.checkpoint)


def cmd_synth(args) -> int:
    from . import datagen
    from .imageio import to_u8, write_pgm

    if args.mnist_dir:
        base = Path(args.mnist_dir)
        src = datagen.load_idx(
            base / f"{args.idx_prefix}-images-idx3-ubyte",
            base / f"{args.idx_prefix}-labels-idx1-ubyte",
        )
    else:
        src = datagen.glyph_source(args.source_count, seed=args.seed + 1_000_003)
    cfg = datagen.SynthConfig(seed=args.seed, count=args.count,
                              p_slot=args.p_slot)
    samples = datagen.synthesize(src, cfg)
    manifest = datagen.write_dataset(args.out, samples)
    for i in range(min(args.dump_pgm, len(samples))):
        write_pgm(Path(args.out) / f"sample{i:06d}.pgm",
                  to_u8(samples[i].image))
    two = sum(1 for s in samples if len([d for d in s.slots if d is not None]) == 2)
    print(f"wrote {len(samples)} samples to {manifest}")
    print(f"two-digit fraction: {two / len(samples):.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .nn import TrainConfig
    from .runs import accuracy_table, run_train

    cfg = TrainConfig(seed=args.seed, epochs=args.epochs,
                      batch_size=args.batch_size, learning_rate=args.lr,
                      momentum=args.momentum,
                      weight_init_scale=args.init_scale)
    result = run_train(args.data, HEAD_CHOICES[args.head], cfg, args.out,
                       test_manifest_path=args.test)
    for rec in result["history"]:
        print(f"epoch {rec['epoch']}: mean loss {rec['mean_loss']:.6f}")
    if "per_digit_accuracy" in result:
        print(accuracy_table(result["per_digit_accuracy"], args.head))
        print(f"mean accuracy: {result['mean_accuracy']:.4f}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_localize(args) -> int:
    from .runs import run_localize

    manifest, network = _load_inputs(args)
    result = run_localize(manifest, _localize_options(args), network=network,
                          out_dir=args.out)
    summary = result["summary"]
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .runs import ablation_table, run_ablation

    manifest, network = _load_inputs(args)
    result = run_ablation(manifest, _localize_options(args), network=network)
    print(ablation_table(result["cells"]))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(
            json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .nn import default_network, gradcheck

    rng = np.random.default_rng(args.seed)
    head = HEAD_CHOICES[args.head]
    net = default_network(head_mode=head, seed=args.seed)
    if head == "pc_sigmoid":
        net.set_priors(np.full(10, 0.15))
    image = rng.normal(0.0, 1.0, size=(1, 28, 56))
    if head == "softmax":
        target = np.asarray(int(rng.integers(10)))
    else:
        target = (rng.random(10) < 0.3).astype(np.float64)
    err = gradcheck(net, image, target, num_coords=args.coords, seed=args.seed)
    print(f"max relative error: {err:.3e} (tolerance {args.tolerance:.1e})")
    if err >= args.tolerance:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_export_check(args) -> int:
    from .runs import LocalizeOptions, run_export_check

    opts = LocalizeOptions(kind=MAP_KINDS[args.map],
                           region_side=args.region_side,
                           threshold=args.threshold)
    report = run_export_check(args.manifest, opts,
                              logit_tolerance=args.tolerance)
    print(json.dumps(report, indent=2, sort_keys=True))
    if not (report["logit_check_pass"] and report["boxes_valid"]):
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "localize": cmd_localize,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "export-check": cmd_export_check,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    from .arrayio import ArrayIOError, ManifestError
    from .datagen import IdxFormatError
    from .nn import NumericError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config(parser, argv)
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArrayIOError, ManifestError, IdxFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

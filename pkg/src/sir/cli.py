"""Command-line entry point: ``sir <command> [--config FILE] [overrides]``.

Exit codes: 0 on success, 1 on usage errors, 2 on data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import DataError
from .pipeline import RunConfig

CONFIG_HELP = """\
configuration keys (JSON object; command-line flags override file values):
  fixture          fixture root holding sparse/, images/, gt/, scene.json
  model_dir        sparse model directory (cameras.txt, images.txt, points3D.txt)
  image_dir        directory of P5/P6 pixmaps named as in images.txt
  gt_dir           ground-truth SIRD depths, one per image stem
  out_dir          output directory (default "out")
  mode             sir | downsample | native (default "sir")
  grid             [I, J] tiles across and down (default [5, 5])
  max_image_size   longest side for the downsample baseline (default 2304)
  cluster_size     target views per cluster (default 20)
  num_sources      source images per reference (default 4)
  workers          worker threads; SIR_WORKERS overrides (default 1)
  seed             oracle scene seed (default 42)
  sweep            {num_hypotheses: 128, window: 7, cost_threshold: 0.3,
                    min_depth: null, max_depth: null}; a set range replaces
                    the range derived from sparse points
  fuse             {min_support: 2, reproj_tol: 1.0, depth_rel_tol: 0.01}
  oracle           {rows: 2, cols: 3, altitude: 50, overlap: 0.7, width: 640,
                    height: 480, focal: null, k1: 0, k2: 0,
                    scene: {extent, height_amplitude, texture_octaves,
                            height_wavelength, texture_wavelength,
                            texture_persistence}}
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _grid(text: str):
    try:
        i, j = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 5x5, got {text!r}") from None
    return [i, j]


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--fixture", help="fixture root directory")
    p.add_argument("--model-dir", dest="model_dir")
    p.add_argument("--image-dir", dest="image_dir")
    p.add_argument("--gt-dir", dest="gt_dir")
    p.add_argument("--out", dest="out_dir", help="output directory")
    p.add_argument("--mode", choices=pipeline.MODES)
    p.add_argument("--grid", type=_grid, help="tiles as IxJ, e.g. 5x5")
    p.add_argument("--max-image-size", dest="max_image_size", type=int)
    p.add_argument("--cluster-size", dest="cluster_size", type=int)
    p.add_argument("--num-sources", dest="num_sources", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--hypotheses", dest="sweep.num_hypotheses", type=int)
    p.add_argument("--window", dest="sweep.window", type=int)
    p.add_argument("--min-depth", dest="sweep.min_depth", type=float)
    p.add_argument("--max-depth", dest="sweep.max_depth", type=float)
    p.add_argument("--rows", dest="oracle.rows", type=int)
    p.add_argument("--cols", dest="oracle.cols", type=int)
    p.add_argument("--width", dest="oracle.width", type=int)
    p.add_argument("--height", dest="oracle.height", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


COMMANDS = {
    "oracle-gen": "render a synthetic fixture (images, GT depths, sparse model)",
    "recapture": "split images into grid tiles with recaptured cameras (writes views/ in --out)",
    "cluster": "group overlapping views into clusters",
    "depth": "plane-sweep depth maps for views/ and clusters.txt in --out",
    "fuse": "filter depth maps and fuse them into cloud.ply",
    "reconstruct": "run every stage for --mode",
    "evaluate": "compare depth maps and cloud in --out with ground truth",
    "bench": "print the analytic memory report",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="sir",
        description="Sub-image recapture and memory-bounded multi-view stereo.",
        epilog=CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, epilog=CONFIG_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(p)
        if name == "bench":
            p.add_argument("--image-width", dest="bench_width", type=int)
            p.add_argument("--image-height", dest="bench_height", type=int)
            p.add_argument("--json", action="store_true", help="print JSON only")
    return parser


_NON_CONFIG = {"command", "config", "verbose", "bench_width", "bench_height", "json"}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
    for key, value in vars(args).items():
        if key in _NON_CONFIG or value is None:
            continue
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    try:
        return RunConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _run(args, cfg: RunConfig) -> None:
    cmd = args.command
    if cmd == "oracle-gen":
        model = pipeline.cmd_oracle_gen(cfg)
        print(f"wrote {len(model.views)} views to {cfg.out_dir}")
    elif cmd == "recapture":
        views = pipeline.cmd_recapture(cfg)
        print(f"wrote {len(views.records)} sub-views to {views.root}")
    elif cmd == "cluster":
        clusters = pipeline.cmd_cluster(cfg)
        print(f"wrote {len(clusters)} clusters to {Path(cfg.out_dir) / 'clusters.txt'}")
    elif cmd == "depth":
        record = pipeline.cmd_depth(cfg)
        print(json.dumps(record, indent=2, sort_keys=True))
    elif cmd == "fuse":
        cloud = pipeline.cmd_fuse(cfg)
        print(f"fused {len(cloud)} points")
    elif cmd == "reconstruct":
        summary = pipeline.cmd_reconstruct(cfg)
        print(json.dumps(summary, indent=2, sort_keys=True))
    elif cmd == "evaluate":
        metrics = pipeline.cmd_evaluate(cfg)
        print(json.dumps({k: metrics[k] for k in ("depth_overall", "filtered_overall", "cloud_accuracy")},
                         indent=2, sort_keys=True))
    elif cmd == "bench":
        report = pipeline.cmd_bench(cfg, args.bench_width, args.bench_height)
        if not args.json:
            print(report.table())
        print(report.to_json())


_NEEDS = {
    "recapture": ("model_dir", "image_dir"),
    "cluster": ("model_dir",),
    "depth": ("model_dir",),
    "reconstruct": ("model_dir", "image_dir"),
    "evaluate": ("gt_dir",),
}


def _check_inputs(args, cfg: RunConfig) -> None:
    missing = [k for k in _NEEDS.get(args.command, ()) if not getattr(cfg, k)]
    if missing:
        raise UsageError(f"{args.command} needs --fixture or " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if args.command == "bench" and not cfg.model_dir and (args.bench_width is None or args.bench_height is None):
        raise UsageError("bench needs --model-dir or --image-width/--image-height")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        _check_inputs(args, cfg)
        _run(args, cfg)
    except UsageError as exc:
        print(f"sir: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"sir: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

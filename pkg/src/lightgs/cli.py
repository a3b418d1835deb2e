"""Command-line entry point: ``lightgs <command> [flags]``.

Exit codes: 0 on success, 2 for bad flags or invalid inputs, 1 for runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import compressor, evalbench, formats
from .errors import FormatError, InvalidArgument, InvalidState
from .optimizer import distill
from .renderer import render_dynamic

log = logging.getLogger("lightgs")


class UsageError(Exception):
    """Raised by the parser instead of exiting, so main() owns the exit code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"{path}: not valid JSON ({exc})") from exc


def _load_data(path):
    path = Path(path)
    if not (path / "cameras.json").is_file():
        raise InvalidArgument(f"{path}: no cameras.json")
    return formats.load_dataset(path)


def _training_frames(dataset):
    train, _ = dataset.split()
    return train if len(train) else dataset


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --- commands -------------------------------------------------------------------


def cmd_synth(args) -> None:
    doc = _read_json(args.spec) if args.spec else {}
    known = {f.name for f in fields(evalbench.SynthSpec)}
    unknown = set(doc) - known
    if unknown:
        raise InvalidArgument(f"unknown synth keys: {', '.join(sorted(unknown))}")
    spec = evalbench.SynthSpec(**doc)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    scene, dataset = evalbench.synth_scene(spec)
    n = formats.save_scene(scene, args.out_scene)
    formats.save_dataset(dataset, args.out_data)
    log.info("wrote %s (%d bytes) and %d frames to %s", args.out_scene, n, len(dataset), args.out_data)


def cmd_render(args) -> None:
    if not 0.0 <= args.time <= 1.0:
        raise InvalidArgument("--time must lie in [0, 1]")
    scene = formats.load_scene(args.scene)
    cam = formats.load_camera(args.camera)
    out, _, _ = render_dynamic(scene.cloud, scene.field, cam, args.time, workers=args.workers)
    formats.write_image(args.out, out.image)


def cmd_score(args) -> None:
    scene = formats.load_scene(args.scene)
    dataset = _load_data(args.data)
    cfg = formats.load_config(args.config)[0] if args.config else compressor.CompressionConfig()
    table = compressor.score_table(scene.cloud, scene.field, dataset, cfg)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "d", "d_hat", "class", "IS"])
        for i in range(len(table)):
            w.writerow([i, repr(float(table.deformation_scores[i])),
                        repr(float(table.normalized_scores[i])), table.classes[i],
                        repr(float(table.importance_scores[i]))])


def cmd_compress(args) -> None:
    cfg, _ = formats.load_config(args.config)
    scene = formats.load_scene(args.scene)
    dataset = _load_data(args.data)
    result = compressor.compress(scene, _training_frames(dataset), cfg)
    formats.save_scene(result.student, args.out)
    if args.report:
        _write_json(args.report, {
            "config": cfg.to_dict(),
            "before": result.before.to_dict(),
            "after": result.after.to_dict(),
            "compression_factor": result.factor,
            "removed": int((result.index_map < 0).sum()),
        })


def cmd_distill(args) -> None:
    _, optim = formats.load_config(args.config)
    if args.iters is not None:
        if args.iters < 0:
            raise InvalidArgument("--iters must be >= 0")
        optim = replace(optim, iterations=args.iters)
    if args.seed is not None:
        optim = replace(optim, seed=args.seed)
    teacher = formats.load_scene(args.teacher)
    student = formats.load_scene(args.student)
    dataset = _load_data(args.data)
    student, trace = distill(teacher, student, _training_frames(dataset), optim)
    formats.save_scene(student, args.out)
    if args.trace:
        formats.write_trace(args.trace, trace)


def cmd_bench(args) -> None:
    cfg, optim = formats.load_config(args.config)
    teacher = formats.load_scene(args.scene)
    dataset = _load_data(args.data)
    student = formats.load_scene(args.student) if args.student else None
    report = evalbench.benchmark(teacher, dataset, cfg, optim, student=student,
                                 ablations=not args.no_ablations)
    _write_json(args.report, report.to_dict())
    print(report.table())


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lightgs", description="Compact dynamic Gaussian scenes: synth, score, compress, distill, bench.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic teacher scene and its frames")
    s.add_argument("--spec", help="JSON with SynthSpec fields (optional)")
    s.add_argument("--out-scene", required=True)
    s.add_argument("--out-data", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("render", help="render a scene at one time from one camera")
    s.add_argument("--scene", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--time", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("score", help="per-Gaussian deformation and importance scores as CSV")
    s.add_argument("--scene", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("compress", help="prune, truncate SH and pool the feature planes")
    s.add_argument("--scene", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("distill", help="fine-tune a compressed student against its teacher")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("bench", help="compress + distill + evaluate, with ablations")
    s.add_argument("--scene", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--student", help="evaluate this student instead of building one")
    s.add_argument("--no-ablations", action="store_true")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (InvalidArgument, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"lightgs {args.command}: {exc}", file=sys.stderr)
        return 2
    except (InvalidState, OSError, ArithmeticError) as exc:
        print(f"lightgs {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

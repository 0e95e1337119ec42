"""Command-line entry point: synth, normalize, extract, match, eval, fuse, report.

Configuration precedence is explicit flags, then the ``--config`` JSON file,
then built-in defaults. Failures exit with a single ``error: <Class>: <msg>``
line on stderr: status 2 for usage and configuration problems, 1 otherwise.
The log level is read from ``SAFEPERI_LOG`` (default WARNING).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import dataset, evaluation, pipeline
from .config import RunConfig
from .errors import AnnotationError, ParameterError, SafePeriError
from .matchers import MATCHER_NAMES, make_matcher

log = logging.getLogger("safeperi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_config_flags(p):
    g = p.add_argument_group("run configuration (override --config)")
    g.add_argument("--config", type=Path, help="JSON run configuration, or a report.json to rerun")
    g.add_argument("--matcher", help=f"{'|'.join(MATCHER_NAMES)}|all, or a comma-separated list")
    g.add_argument("--nf", type=int, help="SAFE ring count")
    g.add_argument("--sigmas", type=_floats, help="SAFE orientation-field scales at the reference radius")
    g.add_argument("--reference-radius", type=float, help="sclera radius the sigmas refer to")
    g.add_argument("--rot-range", type=float, help="SAFE rotation search range in degrees (0 disables)")
    g.add_argument("--rot-step", type=float, help="SAFE rotation search step in degrees")
    g.add_argument("--lbp-metric", choices=("chi2", "euclidean"))
    g.add_argument("--hog-metric", choices=("chi2", "euclidean"))
    g.add_argument("--sift-norm", choices=("min", "avg"))
    g.add_argument("--sift-ratio", type=float)
    g.add_argument("--sift-contrast", type=float)
    g.add_argument("--sift-gate-angle", type=float)
    g.add_argument("--sift-gate-length", type=float)
    g.add_argument("--fusion", help='"all", "none" or combos like safe+hog,safe+lbp+hog')
    g.add_argument("--genuine-mode", choices=("all_pairs", "first_vs_second"))
    g.add_argument("--impostor-cells", choices=("all", "upper"))
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)


_FLAG_KEYS = ("nf", "sigmas", "reference_radius", "rot_range", "rot_step", "lbp_metric", "hog_metric",
              "sift_norm", "sift_ratio", "sift_contrast", "sift_gate_angle", "sift_gate_length", "fusion",
              "genuine_mode", "impostor_cells", "seed", "workers")


def build_config(args) -> RunConfig:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    data = dataclasses.asdict(RunConfig())
    if getattr(args, "config", None) is not None:
        data.update(dataclasses.asdict(RunConfig.load(args.config)))
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    matcher = getattr(args, "matcher", None)
    if matcher is not None:
        data["matchers"] = list(MATCHER_NAMES) if matcher == "all" else [m for m in matcher.split(",") if m]
    cfg = RunConfig.from_dict(data)
    if matcher is not None and cfg.fusion != "none":
        # fusion combos may name matchers that the flag just deselected
        try:
            cfg.fusion_combos()
        except ParameterError:
            if getattr(args, "fusion", None) is not None:
                raise
            cfg = dataclasses.replace(cfg, fusion="all")
    return cfg.validate()


def _annotations(path):
    anns = dataset.load_annotations(path)
    if not anns:
        raise AnnotationError(f"{path}: no valid annotations", [])
    return anns


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = build_config(args)
    anns, _ = dataset.synth_dataset(cfg.seed, args.subjects, args.sessions, tuple(args.scales), args.out,
                                    base_radius=args.radius, eyes=tuple(args.eyes.split(",")))
    print(f"wrote {len(anns)} images to {args.out}")


def cmd_normalize(args):
    anns = _annotations(args.annotations)
    root = args.images or Path(args.annotations).parent
    out = pipeline.normalize_dataset(anns, root, args.out)
    print(f"wrote {len(out)} ROIs to {args.out}")


def cmd_extract(args):
    cfg = build_config(args)
    anns = _annotations(args.annotations)
    cfg = pipeline.resolve_config(cfg, anns)
    roi_root = Path(args.annotations).parent
    for name in cfg.matchers:
        matcher = make_matcher(name, cfg)
        store = pipeline.extract_all(matcher, anns, roi_root, cfg.workers)
        pipeline.save_descriptors(args.out, matcher, store)
        print(f"{name}: {len(store)} descriptors")
    (Path(args.out) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def cmd_match(args):
    cfg = build_config(args)
    anns = _annotations(args.annotations)
    cfg = pipeline.resolve_config(cfg, anns)
    protocol, scoresets = pipeline.score_all(cfg, anns, Path(args.annotations).parent, args.descriptors)
    for s in scoresets:
        evaluation.write_scores(Path(args.out) / f"{s.matcher_id}.csv", s)
    print(f"scored {len(protocol.pairs)} pairs with {', '.join(cfg.matchers)}")


def cmd_eval(args):
    cfg = build_config(args)
    report = pipeline.evaluate(cfg, args.annotations, args.out, args.descriptors)
    for name, e in list(report["matchers"].items()) + list(report["fusion"].items()):
        print(f"{name}: EER {100 * e['eer']:.2f}%")


def _user_map(path):
    return {a.image_id: a.user for a in _annotations(path)}


def cmd_fuse(args):
    users = _user_map(args.annotations)
    scoresets = [evaluation.read_scores(p, users) for p in args.scores]
    fused = evaluation.fuse_cross_validated(scoresets)
    model = evaluation.train_fusion(scoresets)
    out = Path(args.out)
    evaluation.write_scores(out / f"{fused.matcher_id.replace('+', '_')}.csv", fused)
    (out / f"model_{fused.matcher_id.replace('+', '_')}.json").write_text(json.dumps(model.to_json(), indent=2))
    print(f"{fused.matcher_id}: cross-validated EER {100 * evaluation.eer(fused):.2f}%")


def cmd_report(args):
    cfg = build_config(args)
    users = _user_map(args.annotations) if args.annotations else None
    sets = [evaluation.read_scores(p, users) for p in args.scores]
    individual = [s for s in sets if "+" not in s.matcher_id]
    fused = [s for s in sets if "+" in s.matcher_id]
    report = evaluation.build_report(individual, fused, cfg.to_dict())
    formats = tuple(args.format.split(","))
    evaluation.emit_report(report, args.out, formats)
    print(f"report written to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="safeperi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic periocular dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--sessions", type=int, default=2)
    p.add_argument("--scales", type=_floats, default=[1.0, 1.25, 1.5])
    p.add_argument("--radius", type=float, default=20.0, help="sclera radius at scale 1")
    p.add_argument("--eyes", default="L")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("normalize", help="resize and crop sclera-centred ROIs per distance group")
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--images", type=Path, help="image root (default: the annotation file's folder)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("extract", help="extract descriptors from normalised ROIs")
    p.add_argument("--annotations", type=Path, required=True, help="annotations.csv written by normalize")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("match", help="score the verification protocol")
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--descriptors", type=Path, help="descriptor folder from extract (extracted on the fly otherwise)")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="match, fuse and report in one go")
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--descriptors", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="cross-validated logistic fusion of score files")
    p.add_argument("--scores", type=Path, nargs="+", required=True)
    p.add_argument("--annotations", type=Path, required=True, help="needed to group pairs by user")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("report", help="EER/DET report from score files")
    p.add_argument("--scores", type=Path, nargs="+", required=True)
    p.add_argument("--annotations", type=Path)
    p.add_argument("--format", default="json,csv")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_report)
    return parser


def _fail(exc, code):
    print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    level = os.environ.get("SAFEPERI_LOG", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 2)
    try:
        args.func(args)
    except (UsageError, ParameterError) as exc:
        return _fail(exc, 2)
    except (SafePeriError, OSError, ValueError) as exc:
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Dataset-level orchestration: normalise, extract, match, fuse, report."""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import dataset, evaluation
from .config import RunConfig
from .evaluation import _tag_key
from .matchers import make_matcher
from .rasters import read_image, write_png

log = logging.getLogger(__name__)


def normalize_dataset(annotations, image_root, out_dir) -> list:
    """Normalise every image to its distance group's mean sclera radius; writes ROIs and a CSV."""
    image_root, out_dir = Path(image_root), Path(out_dir)
    targets = dataset.group_targets(annotations)
    out = []
    for ann in annotations:
        img = read_image(image_root / ann.image_path)
        roi, new = dataset.normalize_image(img, ann, targets[ann.distance_tag])
        name = Path(ann.image_path).with_suffix(".png").as_posix()
        write_png(out_dir / name, roi)
        out.append(dataclasses.replace(new, image_path=name))
    dataset.save_annotations(out_dir / "annotations.csv", out)
    return out


def first_group_radius(annotations) -> float:
    first = min({a.distance_tag for a in annotations}, key=_tag_key)
    return dataset.group_target_radius(annotations, first)


def resolve_config(cfg: RunConfig, annotations) -> RunConfig:
    """Fill in data-dependent defaults (the sigma reference radius)."""
    if cfg.reference_radius is None:
        cfg = dataclasses.replace(cfg, reference_radius=first_group_radius(annotations))
    return cfg.validate()


def _extract_one(args):
    matcher, path, ann = args
    return matcher.extract(read_image(path), ann)


def extract_all(matcher, annotations, roi_root, workers: int = 1) -> dict:
    """Descriptors for every annotated ROI, keyed by image id."""
    roi_root = Path(roi_root)
    jobs = [(matcher, roi_root / a.image_path, a) for a in annotations]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            descs = list(pool.map(_extract_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        descs = [_extract_one(j) for j in jobs]
    return {a.image_id: d for a, d in zip(annotations, descs)}


def descriptor_path(root, matcher_name, image_id) -> Path:
    return Path(root) / matcher_name / (Path(image_id).with_suffix("").as_posix() + ".json")


def save_descriptors(root, matcher, store: dict) -> None:
    for image_id, d in store.items():
        path = descriptor_path(root, matcher.name, image_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(matcher.to_json(d)))


def load_descriptors(root, matcher, annotations) -> dict:
    store = {}
    for a in annotations:
        path = descriptor_path(root, matcher.name, a.image_id)
        if path.exists():
            store[a.image_id] = matcher.from_json(json.loads(path.read_text()))
    return store


def score_all(cfg: RunConfig, annotations, roi_root, descriptors_dir=None):
    """Protocol plus one ScoreSet per configured matcher."""
    protocol = evaluation.generate_protocol(annotations, cfg.genuine_mode, cfg.impostor_cells)
    for line in protocol.diagnostics:
        log.info("protocol: %s", line)
    scoresets = []
    for name in cfg.matchers:
        matcher = make_matcher(name, cfg)
        if descriptors_dir is not None:
            store = load_descriptors(descriptors_dir, matcher, annotations)
        else:
            store = extract_all(matcher, annotations, roi_root, cfg.workers)
        scoresets.append(evaluation.run_matcher(protocol, matcher, store, cfg.workers))
    return protocol, scoresets


def fuse_all(cfg: RunConfig, scoresets) -> list:
    by_id = {s.matcher_id: s for s in scoresets}
    return [evaluation.fuse_cross_validated([by_id[m] for m in combo]) for combo in cfg.fusion_combos()]


def evaluate(cfg: RunConfig, annotations_path, out_dir, descriptors_dir=None) -> dict:
    """Full run on a normalised dataset; writes scores, report and DET files under ``out_dir``."""
    annotations = dataset.load_annotations(annotations_path)
    cfg = resolve_config(cfg, annotations)
    roi_root = Path(annotations_path).parent
    protocol, scoresets = score_all(cfg, annotations, roi_root, descriptors_dir)
    fused = fuse_all(cfg, scoresets)
    out_dir = Path(out_dir)
    for s in list(scoresets) + list(fused):
        evaluation.write_scores(out_dir / "scores" / f"{s.matcher_id.replace('+', '_')}.csv", s)
    report = evaluation.build_report(scoresets, fused, cfg.to_dict(), protocol)
    evaluation.emit_report(report, out_dir)
    return report

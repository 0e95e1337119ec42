"""Eye annotations, per-distance geometric normalisation and a synthetic eye generator."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AnnotationError, ParameterError
from .imgproc import bicubic_resize, check_gray
from .rasters import write_png

log = logging.getLogger(__name__)

CSV_COLUMNS = ("image_path", "subject_id", "eye", "session", "distance_tag",
               "sclera_x", "sclera_y", "sclera_r", "pupil_x", "pupil_y", "pupil_r")
ROI_FACTOR = 3.8  # ROI half side in sclera radii


@dataclass(frozen=True)
class EyeAnnotation:
    image_path: str
    subject_id: str
    eye: str
    session: int
    distance_tag: str
    sclera_x: float
    sclera_y: float
    sclera_r: float
    pupil_x: float
    pupil_y: float
    pupil_r: float

    @property
    def user(self) -> tuple:
        """Verification identity: each (subject, eye) is a separate user."""
        return (self.subject_id, self.eye)

    @property
    def image_id(self) -> str:
        return self.image_path

    def validate(self, shape=None):
        problems = []
        if self.eye not in ("L", "R"):
            problems.append(f"eye must be L or R, got {self.eye!r}")
        if not (self.sclera_r > 0 and self.pupil_r > 0):
            problems.append("radii must be positive")
        elif self.pupil_r >= self.sclera_r:
            problems.append(f"pupil radius {self.pupil_r} >= sclera radius {self.sclera_r}")
        coords = (self.sclera_x, self.sclera_y, self.pupil_x, self.pupil_y, self.sclera_r, self.pupil_r)
        if not all(math.isfinite(v) for v in coords):
            problems.append("non-finite geometry")
        if min(self.sclera_x, self.sclera_y, self.pupil_x, self.pupil_y) < 0:
            problems.append("centres must have non-negative coordinates")
        if shape is not None:
            h, w = shape
            for name, x, y in (("sclera", self.sclera_x, self.sclera_y), ("pupil", self.pupil_x, self.pupil_y)):
                if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
                    problems.append(f"{name} centre ({x}, {y}) outside {w}x{h} image")
        return problems

    def to_row(self) -> dict:
        row = dataclasses.asdict(self)
        return {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}


_FLOAT_FIELDS = ("sclera_x", "sclera_y", "sclera_r", "pupil_x", "pupil_y", "pupil_r")


def _parse_row(row: dict) -> EyeAnnotation:
    kwargs = {}
    for name in CSV_COLUMNS:
        raw = (row.get(name) or "").strip()
        if raw == "":
            raise ValueError(f"empty field {name}")
        if name in _FLOAT_FIELDS:
            kwargs[name] = float(raw)
        elif name == "session":
            kwargs[name] = int(raw)
        else:
            kwargs[name] = raw
    return EyeAnnotation(**kwargs)


def load_annotations(path, on_error: str = "skip") -> list:
    """Parse and validate an annotation CSV.

    Invalid rows are logged and skipped (``on_error="skip"``) or collected
    into a single :class:`AnnotationError` (``on_error="raise"``). A missing
    column or a file with no valid rows is always an error.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise AnnotationError(f"{path}: missing column(s) {', '.join(missing)}")
        records, problems = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                ann = _parse_row(row)
            except ValueError as exc:
                problems.append(f"{path}:{lineno}: {exc}")
                continue
            bad = ann.validate()
            if bad:
                problems.append(f"{path}:{lineno}: {'; '.join(bad)}")
                continue
            records.append(ann)
    if problems:
        if on_error == "raise":
            raise AnnotationError(f"{len(problems)} invalid row(s) in {path}", problems)
        for p in problems:
            log.warning("rejected annotation row %s", p)
    if not records:
        raise AnnotationError(f"{path}: no valid annotation rows", problems)
    return records


def save_annotations(path, annotations: Sequence[EyeAnnotation]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for ann in annotations:
            writer.writerow(ann.to_row())


# ---------------------------------------------------------------------------
# normalisation


def roi_side(target_rs: float) -> int:
    """Odd crop side, about 7.6 sclera radii, with the sclera centre on the middle pixel."""
    return 2 * int(math.floor(ROI_FACTOR * target_rs)) + 1


def group_target_radius(annotations: Sequence[EyeAnnotation], distance_tag: str) -> float:
    radii = [a.sclera_r for a in annotations if a.distance_tag == distance_tag]
    if not radii:
        raise ParameterError(f"no annotations in distance group {distance_tag!r}")
    return float(np.mean(radii))


def group_targets(annotations: Sequence[EyeAnnotation]) -> dict:
    return {tag: group_target_radius(annotations, tag) for tag in sorted({a.distance_tag for a in annotations})}


def normalize_image(img, ann: EyeAnnotation, target_rs: float):
    """Resize so the sclera radius becomes ``target_rs`` and crop the square ROI around it.

    Returns ``(roi, annotation)`` with the annotation mapped to ROI pixels.
    Crops extending past the image are replicate-padded (and logged).
    """
    img = check_gray(img)
    if not target_rs > 0 or not ann.sclera_r > 0:
        raise ParameterError(f"degenerate scale: target {target_rs}, radius {ann.sclera_r}")
    scale = target_rs / ann.sclera_r
    resized = img if scale == 1.0 else bicubic_resize(img, scale)

    def mapped(v):
        return (v + 0.5) * scale - 0.5

    cx, cy = mapped(ann.sclera_x), mapped(ann.sclera_y)
    side = roi_side(target_rs)
    half = side // 2
    icx, icy = int(math.floor(cx + 0.5)), int(math.floor(cy + 0.5))
    h, w = resized.shape
    r0, c0 = icy - half, icx - half
    pad = max(0, -r0, -c0, r0 + side - h, c0 + side - w)
    if pad:
        log.info("ROI for %s exceeds image by %d px; replicate-padding", ann.image_path, pad)
        resized = np.pad(resized, pad, mode="edge")
    roi = resized[r0 + pad:r0 + pad + side, c0 + pad:c0 + pad + side]
    new = dataclasses.replace(
        ann,
        sclera_x=half + (cx - icx), sclera_y=half + (cy - icy), sclera_r=ann.sclera_r * scale,
        pupil_x=half + (mapped(ann.pupil_x) - icx), pupil_y=half + (mapped(ann.pupil_y) - icy),
        pupil_r=ann.pupil_r * scale,
    )
    return roi, new


# ---------------------------------------------------------------------------
# synthetic data


def _smoothstep(d, width):
    """Soft indicator of d > 0 with a transition of about ``width``."""
    return 0.5 * (1.0 + np.tanh(d / width))


@dataclass(frozen=True)
class _Identity:
    skin: float
    pupil_ratio: float
    half_width: float
    upper: float
    lower: float
    tilt: float
    brow_height: float
    brow_curve: float
    brow_width: float
    brow_dark: float
    crease: float
    waves: np.ndarray  # (K, 4): frequency x, frequency y, phase, amplitude
    iris_waves: np.ndarray


def _identity(rng: np.random.Generator) -> _Identity:
    def waves(k, fmin, fmax):
        f = rng.uniform(fmin, fmax, k)
        th = rng.uniform(0, np.pi, k)
        return np.column_stack([f * np.cos(th), f * np.sin(th), rng.uniform(0, 2 * np.pi, k),
                                rng.uniform(0.5, 1.0, k)])
    return _Identity(
        skin=rng.uniform(0.45, 0.62), pupil_ratio=rng.uniform(0.35, 0.5),
        half_width=rng.uniform(2.3, 2.9), upper=rng.uniform(0.9, 1.35), lower=rng.uniform(0.7, 1.05),
        tilt=rng.uniform(-0.15, 0.15), brow_height=rng.uniform(2.0, 2.7), brow_curve=rng.uniform(0.05, 0.2),
        brow_width=rng.uniform(0.2, 0.4), brow_dark=rng.uniform(0.2, 0.35), crease=rng.uniform(0.3, 0.6),
        waves=waves(32, 0.3, 1.4), iris_waves=waves(8, 1.0, 3.0),
    )


def _band_texture(u, v, waves):
    acc = np.zeros_like(u)
    for fx, fy, ph, amp in waves:
        acc += amp * np.cos(2 * np.pi * (fx * u + fy * v) + ph)
    return acc / math.sqrt(np.sum(waves[:, 3] ** 2) / 2)


def render_eye(ident: _Identity, shape, center, radius: float, rng: np.random.Generator, jitter=None,
               tilt: float = 0.0, lid_scale: float = 1.0):
    """Render one procedural eye; geometry in sclera-radius units around ``center`` (x, y).

    ``tilt`` rotates the periocular layout (radians, array frame) and
    ``lid_scale`` widens or narrows the eyelid opening.
    """
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    x0 = (cols - center[0]) / radius
    y0 = (rows - center[1]) / radius
    c, s = math.cos(tilt), math.sin(tilt)
    u = c * x0 + s * y0
    v = -s * x0 + c * y0
    aa = 0.75 / radius  # anti-aliasing width: under a pixel

    img = ident.skin + 0.11 * _band_texture(u, v, ident.waves)

    span = np.clip(1 - (u / ident.half_width) ** 2, 0, None)
    lid_up = -ident.upper * lid_scale * span + ident.tilt * u
    lid_lo = ident.lower * lid_scale * span + ident.tilt * u
    brow = -ident.brow_height - ident.brow_curve * (1.5 - u * u / 2) + 0.3 * ident.tilt * u
    brow_mask = _smoothstep(3.2 - np.abs(u + 0.3), 0.2)
    img -= ident.brow_dark * np.exp(-((v - brow) ** 2) / (2 * ident.brow_width**2)) * brow_mask
    crease = lid_up - ident.crease
    img -= 0.12 * np.exp(-((v - crease) ** 2) / (2 * 0.06**2)) * (span > 0)

    opening = _smoothstep(v - lid_up, aa) * _smoothstep(lid_lo - v, aa) * (span > 0)
    r = np.hypot(u, v)
    eye = np.full_like(u, 0.86)
    iris = 0.32 + 0.06 * _band_texture(u, v, ident.iris_waves)
    eye = eye + (iris - eye) * _smoothstep(1 - r, aa)
    eye = eye + (0.07 - eye) * _smoothstep(ident.pupil_ratio - r, aa)
    img = img * (1 - opening) + eye * opening
    img -= 0.3 * np.exp(-((v - lid_up) ** 2) / (2 * 0.05**2)) * (span > 0)

    if jitter is not None:
        gain, offset, noise = jitter
        img = gain * img + offset + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(seed: int, n_subjects: int, sessions: int = 2, distance_scales=(1.0, 1.25, 1.5),
                  out_dir=None, base_radius: float = 20.0, eyes=("L",)):
    """Deterministic procedural periocular dataset.

    Each (subject, eye) gets an identity-keyed eye: sclera/iris and pupil
    discs, eyelids, crease, eyebrow and band-limited skin texture. Sessions
    add photometric jitter, sensor noise, up to 3 px (base scale) of centre
    jitter, +/-4 % radius jitter, +/-2 degrees of in-plane tilt and eyelid
    opening changes. ``distance_scales`` map to tags
    D1, D2, ... in order. Images go to ``out_dir`` as 8-bit PNG next to an
    ``annotations.csv``; returns ``(annotations, images)`` where images maps
    image_path to the rendered array.
    """
    if n_subjects < 2:
        raise ParameterError("need at least 2 subjects")
    if sessions < 1 or not distance_scales:
        raise ParameterError("need at least one session and one scale")
    out = Path(out_dir) if out_dir is not None else None
    annotations, images = [], {}
    for subject in range(n_subjects):
        for e_idx, eye in enumerate(eyes):
            ident = _identity(np.random.default_rng([seed, subject, e_idx]))
            for session in range(1, sessions + 1):
                srng = np.random.default_rng([seed, subject, e_idx, session])
                jx, jy = srng.uniform(-3, 3, 2)
                r_jit = srng.uniform(0.96, 1.04)
                gain, offset = srng.uniform(0.9, 1.1), srng.uniform(-0.04, 0.04)
                tilt, lid_scale = math.radians(srng.uniform(-2, 2)), srng.uniform(0.92, 1.08)
                for d_idx, scale in enumerate(distance_scales):
                    irng = np.random.default_rng([seed, subject, e_idx, session, d_idx, 1])
                    radius = base_radius * scale * r_jit
                    h = 2 * int(math.ceil(4.4 * base_radius * scale)) + 1
                    w = 2 * int(math.ceil(5.0 * base_radius * scale)) + 1
                    cx, cy = (w - 1) / 2 + jx * scale, (h - 1) / 2 + jy * scale
                    img = render_eye(ident, (h, w), (cx, cy), radius, irng, (gain, offset, 0.01), tilt, lid_scale)
                    tag = f"D{d_idx + 1}"
                    name = f"s{subject:03d}_{eye}_sess{session}_{tag}.png"
                    ann = EyeAnnotation(name, f"s{subject:03d}", eye, session, tag, float(cx), float(cy),
                                        float(radius), float(cx), float(cy), float(radius * ident.pupil_ratio))
                    annotations.append(ann)
                    images[name] = img
                    if out is not None:
                        write_png(out / name, img)
    if out is not None:
        save_annotations(out / "annotations.csv", annotations)
    return annotations, images

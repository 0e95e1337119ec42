"""Uniform extract/compare wrappers around the four descriptor families.

Every matcher turns a normalised ROI plus its annotation into a descriptor,
serialises it to JSON, and compares two descriptors into a similarity
(higher means more likely genuine) together with a degeneracy flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import safe, sift, texture
from .errors import ParameterError, UndefinedScoreError

MATCHER_NAMES = ("safe", "sift", "lbp", "hog")


@dataclass(frozen=True)
class SafeMatcher:
    config: safe.SafeConfig = safe.SafeConfig()
    reference_radius: float = safe.REFERENCE_RADIUS
    rot_range: float = 0.0
    rot_step: float = 1.0
    name: str = "safe"

    def extract(self, roi, ann):
        sigmas = safe.scale_sigmas(self.config.base_sigmas, ann.sclera_r, self.reference_radius)
        return safe.extract(roi, ann, sigmas, self.config)

    def compare(self, a, b):
        try:
            if self.rot_range > 0:
                return safe.match_with_rotation(a, b, self.rot_range, self.rot_step), ""
            return safe.match(a, b), ""
        except UndefinedScoreError:
            return 0.0, "degenerate"

    def to_json(self, d):
        return d.to_json()

    def from_json(self, obj):
        return safe.SafeDescriptor.from_json(obj)


@dataclass(frozen=True)
class BlockMatcher:
    name: str
    metric: str = "chi2"

    def __post_init__(self):
        if self.name not in ("lbp", "hog"):
            raise ParameterError(f"block matcher must be lbp or hog, got {self.name!r}")
        if self.metric not in ("chi2", "euclidean"):
            raise ParameterError(f"unknown metric {self.metric!r}")

    def extract(self, roi, ann):
        fn = texture.extract_lbp if self.name == "lbp" else texture.extract_hog
        return fn(roi)

    def compare(self, a, b):
        return texture.similarity(a, b, self.metric), ""

    def to_json(self, d):
        return d.to_json()

    def from_json(self, obj):
        return texture.BlockDescriptor.from_json(obj)


@dataclass(frozen=True)
class SiftImage:
    """Keypoints of one ROI together with its dimensions (needed by the geometric gate)."""
    keypoints: list = field(repr=False)
    shape: tuple

    def to_json(self):
        return {"matcher": "sift", "count": len(self.keypoints), "height": int(self.shape[0]),
                "width": int(self.shape[1]), "keypoints": [k.to_json() for k in self.keypoints]}

    @classmethod
    def from_json(cls, obj):
        kps = [sift.SiftKeypoint.from_json(k) for k in obj["keypoints"]]
        return cls(kps, (int(obj["height"]), int(obj["width"])))


@dataclass(frozen=True)
class SiftMatcher:
    params: sift.SiftParams = sift.SiftParams()
    name: str = "sift"

    def extract(self, roi, ann):
        return SiftImage(sift.describe(roi, self.params), tuple(np.shape(roi)))

    def compare(self, a, b):
        score, degenerate = sift.compare(a.keypoints, b.keypoints, a.shape, b.shape, self.params)
        return score, ("degenerate" if degenerate else "")

    def to_json(self, d):
        return d.to_json()

    def from_json(self, obj):
        return SiftImage.from_json(obj)


def make_matcher(name: str, cfg=None):
    """Build a matcher from a :class:`~safeperi.config.RunConfig` (defaults when ``cfg`` is None)."""
    from .config import RunConfig

    cfg = cfg or RunConfig()
    if name == "safe":
        sc = safe.SafeConfig(n_rings=cfg.nf, base_sigmas=tuple(cfg.sigmas))
        return SafeMatcher(sc, cfg.reference_radius or safe.REFERENCE_RADIUS, cfg.rot_range, cfg.rot_step)
    if name == "lbp":
        return BlockMatcher("lbp", cfg.lbp_metric)
    if name == "hog":
        return BlockMatcher("hog", cfg.hog_metric)
    if name == "sift":
        return SiftMatcher(sift.SiftParams(norm=cfg.sift_norm, ratio=cfg.sift_ratio,
                                           contrast_threshold=cfg.sift_contrast,
                                           gate_angle_deg=cfg.sift_gate_angle,
                                           gate_length=cfg.sift_gate_length))
    raise ParameterError(f"unknown matcher {name!r}; choose from {', '.join(MATCHER_NAMES)}")

"""Run configuration shared by the CLI, the reports and the scripts."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ParameterError

GENUINE_MODES = ("all_pairs", "first_vs_second")
CELL_MODES = ("all", "upper")


@dataclass
class RunConfig:
    """Everything that determines the numbers in a report.

    ``workers`` only changes how work is scheduled, never the results, so it
    is left out of :meth:`to_dict` (and therefore out of report echoes).
    """
    matchers: list = field(default_factory=lambda: ["safe", "sift", "lbp", "hog"])
    nf: int = 4
    sigmas: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0])
    reference_radius: Optional[float] = None  # None: mean sclera radius of the first distance group
    rot_range: float = 0.0
    rot_step: float = 1.0
    lbp_metric: str = "chi2"
    hog_metric: str = "chi2"
    sift_norm: str = "min"
    sift_ratio: float = 0.8
    sift_contrast: float = 0.03
    sift_gate_angle: float = 20.0
    sift_gate_length: float = 0.15
    fusion: str = "all"  # "all" combinations of 2+ matchers, "none", or "+"-joined combos separated by ","
    genuine_mode: str = "all_pairs"
    impostor_cells: str = "all"
    seed: int = 0
    workers: int = 1

    def validate(self) -> "RunConfig":
        from .matchers import MATCHER_NAMES

        bad = [m for m in self.matchers if m not in MATCHER_NAMES]
        if bad or not self.matchers:
            raise ParameterError(f"unknown matcher(s) {bad}; choose from {', '.join(MATCHER_NAMES)}")
        if len(set(self.matchers)) != len(self.matchers):
            raise ParameterError("matchers listed twice")
        if self.nf < 1:
            raise ParameterError("nf must be >= 1")
        if not self.sigmas or min(self.sigmas) <= 0:
            raise ParameterError("sigmas must be positive")
        if self.reference_radius is not None and self.reference_radius <= 0:
            raise ParameterError("reference_radius must be positive")
        if self.rot_range < 0 or self.rot_step <= 0:
            raise ParameterError("rotation needs range >= 0 and step > 0")
        for name in ("lbp_metric", "hog_metric"):
            if getattr(self, name) not in ("chi2", "euclidean"):
                raise ParameterError(f"{name} must be chi2 or euclidean")
        if self.sift_norm not in ("min", "avg"):
            raise ParameterError("sift_norm must be min or avg")
        if not 0 < self.sift_ratio <= 1:
            raise ParameterError("sift_ratio must be in (0, 1]")
        if self.genuine_mode not in GENUINE_MODES:
            raise ParameterError(f"genuine_mode must be one of {GENUINE_MODES}")
        if self.impostor_cells not in CELL_MODES:
            raise ParameterError(f"impostor_cells must be one of {CELL_MODES}")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")
        self.fusion_combos()
        return self

    def fusion_combos(self) -> list:
        from itertools import combinations

        if self.fusion == "none":
            return []
        if self.fusion == "all":
            return [list(c) for r in range(2, len(self.matchers) + 1) for c in combinations(self.matchers, r)]
        combos = [c.split("+") for c in self.fusion.split(",") if c]
        for c in combos:
            if len(c) < 2 or any(m not in self.matchers for m in c):
                raise ParameterError(f"fusion combo {'+'.join(c)} must name 2+ selected matchers")
        return combos

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("workers")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParameterError(f"cannot read config {path}: {exc}") from exc
        if "config" in data and isinstance(data["config"], dict):
            data = data["config"]  # accept a report and rerun from its echo
        return cls.from_dict(data)

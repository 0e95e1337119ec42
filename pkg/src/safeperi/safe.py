"""SAFE descriptor: annular harmonic filters projected on orientation fields.

A descriptor holds, for every inner scale sigma, an ``(N_h, N_f)`` array of
complex projections of the orientation field onto ring filters
``psi_nk = r^mu exp(-r^2 / 2 s^2) exp(i n phi) / kappa`` centred on the sclera
centre. Rows follow ``orders`` (default -4..4), columns go from the innermost
to the outermost ring.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ExtractionError, IncompatibleDescriptorError, ParameterError, UndefinedScoreError
from .imgproc import ComplexKernel, check_gray, clahe, kernel_grid, orientation_field

DEFAULT_ORDERS = tuple(range(-4, 5))
# average sclera radius of the 8 m distance group, the scale at which sigma = 1..4 is defined
REFERENCE_RADIUS = 39.16


@dataclass(frozen=True)
class SafeConfig:
    n_rings: int = 4
    orders: tuple = DEFAULT_ORDERS
    base_sigmas: tuple = (1.0, 2.0, 3.0, 4.0)
    r_max_factor: float = 3.8
    clahe_clip: float = 0.01
    clahe_tiles: tuple = (8, 8)

    def __post_init__(self):
        if self.n_rings < 1:
            raise ParameterError("n_rings must be >= 1")
        if not self.orders:
            raise ParameterError("orders must be non-empty")
        if not self.base_sigmas or min(self.base_sigmas) <= 0:
            raise ParameterError("base_sigmas must be positive and non-empty")
        if self.r_max_factor <= 1:
            raise ParameterError("r_max_factor must exceed 1")

    def params_hash(self) -> str:
        blob = json.dumps({
            "n_rings": int(self.n_rings),
            "orders": [int(n) for n in self.orders],
            "base_sigmas": [float(s) for s in self.base_sigmas],
            "r_max_factor": float(self.r_max_factor),
            "clahe_clip": float(self.clahe_clip),
            "clahe_tiles": [int(t) for t in self.clahe_tiles],
        }, sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()[:16]


def scale_sigmas(base_sigmas: Sequence[float], radius: float, reference_radius: float = REFERENCE_RADIUS):
    """Scale inner-scale sigmas in proportion to the sclera radius (no rounding)."""
    ratio = float(radius) / float(reference_radius)
    return tuple(float(s) * ratio for s in base_sigmas)


# ---------------------------------------------------------------------------
# filters


@dataclass(frozen=True)
class Ring:
    peak: float
    sigma: float
    mu: float


def ring_filter(n: int, r_peak: float, sigma_r: float, side: int | None = None) -> ComplexKernel:
    """Annular harmonic filter of order ``n`` peaking at radius ``r_peak``, unit L2 norm."""
    if not (r_peak > 0 and sigma_r > 0):
        raise ParameterError(f"r_peak and sigma_r must be positive, got {r_peak}, {sigma_r}")
    min_side = 2 * math.ceil(r_peak + 4 * sigma_r) + 1
    if side is None:
        side = min_side
    if side < min_side or side % 2 == 0:
        raise ParameterError(f"side must be odd and >= {min_side} to contain the ring, got {side}")
    mu = (r_peak / sigma_r) ** 2
    x, y = kernel_grid(side)
    r = np.hypot(x, y)
    with np.errstate(divide="ignore"):
        # log-domain profile relative to the peak, keeps large mu from overflowing
        log_prof = mu * np.log(r / r_peak) - (r * r - r_peak * r_peak) / (2 * sigma_r * sigma_r)
    prof = np.exp(log_prof)
    prof[r == 0] = 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        phase = np.where(r > 0, (x + 1j * y) / r, 1.0) ** n
    taps = prof * phase
    kappa = float(np.sqrt(np.sum(np.abs(taps) ** 2)))
    return ComplexKernel(taps / kappa, int(n), float(sigma_r),
                         ring={"peak": float(r_peak), "mu": float(mu), "sigma": float(sigma_r), "kappa": kappa})


def ring_edges(r_min: float, r_max: float, n_rings: int) -> np.ndarray:
    j = np.arange(n_rings + 1)
    return r_min * (r_max / r_min) ** (j / n_rings)


@dataclass(frozen=True, eq=False)
class FilterBank:
    orders: tuple
    r_min: float
    r_max: float
    rings: tuple
    taps: np.ndarray = field(repr=False)  # (N_h, N_f, side, side), shared odd side

    @property
    def n_orders(self) -> int:
        return len(self.orders)

    @property
    def n_rings(self) -> int:
        return len(self.rings)

    @property
    def side(self) -> int:
        return self.taps.shape[-1]

    def kernel(self, n: int, k: int) -> ComplexKernel:
        """Filter for order ``n`` and ring ``k`` (1-based, innermost first)."""
        ring = self.rings[k - 1]
        return ComplexKernel(self.taps[self.orders.index(n), k - 1], n, ring.sigma,
                             ring={"peak": ring.peak, "mu": ring.mu, "sigma": ring.sigma})


def build_filter_bank(r_min: float, r_max: float, n_rings: int, orders=DEFAULT_ORDERS) -> FilterBank:
    """Log-equidistant ring partition of ``[r_min, r_max]``, one filter per (order, ring).

    Band edges are geometric; each ring peaks at the geometric mean of its
    band and has radial scale equal to half the band width.
    """
    orders = tuple(int(n) for n in orders)
    if not (0 < r_min < r_max):
        raise ParameterError(f"need 0 < r_min < r_max, got {r_min}, {r_max}")
    if n_rings < 1 or not orders:
        raise ParameterError("need at least one ring and one order")
    return _cached_bank(float(r_min), float(r_max), int(n_rings), orders)


@functools.lru_cache(maxsize=64)
def _cached_bank(r_min, r_max, n_rings, orders):
    edges = ring_edges(r_min, r_max, n_rings)
    rings = []
    for k in range(n_rings):
        peak = math.sqrt(edges[k] * edges[k + 1])
        sigma = (edges[k + 1] - edges[k]) / 2
        rings.append(Ring(peak, sigma, (peak / sigma) ** 2))
    side = max(2 * math.ceil(r.peak + 4 * r.sigma) + 1 for r in rings)
    taps = np.empty((len(orders), n_rings, side, side), dtype=np.complex128)
    for i, n in enumerate(orders):
        for k, ring in enumerate(rings):
            taps[i, k] = ring_filter(n, ring.peak, ring.sigma, side).taps
    taps.setflags(write=False)
    return FilterBank(orders, r_min, r_max, tuple(rings), taps)


# ---------------------------------------------------------------------------
# descriptor


@dataclass(frozen=True, eq=False)
class SafeDescriptor:
    scales: tuple
    coeffs: np.ndarray  # (n_scales, N_h, N_f) complex
    params_hash: str
    orders: tuple = DEFAULT_ORDERS
    sclera_radius_px: float = 0.0

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if coeffs.ndim != 3 or coeffs.shape[0] != len(self.scales) or coeffs.shape[1] != len(self.orders):
            raise ParameterError(f"coefficient array shape {coeffs.shape} inconsistent with "
                                 f"{len(self.scales)} scales and {len(self.orders)} orders")
        if not np.all(np.isfinite(coeffs)):
            raise ParameterError("SAFE coefficients must be finite")
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "orders", tuple(int(n) for n in self.orders))

    @property
    def n_rings(self) -> int:
        return self.coeffs.shape[2]

    @property
    def size(self) -> int:
        return self.coeffs.size

    def flat(self) -> np.ndarray:
        """Coefficients ordered scale-major, then order, then ring."""
        return self.coeffs.ravel()

    def with_coeffs(self, coeffs) -> "SafeDescriptor":
        return SafeDescriptor(self.scales, coeffs, self.params_hash, self.orders, self.sclera_radius_px)

    def to_json(self) -> dict:
        return {
            "matcher": "safe",
            "params_hash": self.params_hash,
            "sclera_radius_px": self.sclera_radius_px,
            "scales": list(self.scales),
            "orders": list(self.orders),
            "n_rings": self.n_rings,
            "coeffs": [[[float(c.real), float(c.imag)] for c in scale.ravel()] for scale in self.coeffs],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SafeDescriptor":
        if obj.get("matcher") != "safe":
            raise ParameterError(f"not a SAFE descriptor: matcher={obj.get('matcher')!r}")
        orders = tuple(obj.get("orders", DEFAULT_ORDERS))
        raw = np.asarray(obj["coeffs"], dtype=np.float64)
        n_scales = raw.shape[0]
        n_rings = int(obj.get("n_rings", raw.shape[1] // len(orders)))
        coeffs = (raw[..., 0] + 1j * raw[..., 1]).reshape(n_scales, len(orders), n_rings)
        return cls(tuple(obj["scales"]), coeffs, obj["params_hash"], orders, float(obj["sclera_radius_px"]))


def project(field: np.ndarray, bank: FilterBank, center) -> np.ndarray:
    """Scalar products of every bank filter with ``field`` centred at ``center`` (col, row).

    Taps falling outside the field see zero.
    """
    h, w = field.shape
    cx, cy = int(round(center[0])), int(round(center[1]))
    r = bank.side // 2
    r0, r1 = max(cy - r, 0), min(cy + r + 1, h)
    c0, c1 = max(cx - r, 0), min(cx + r + 1, w)
    taps = bank.taps[:, :, r0 - (cy - r):r1 - (cy - r), c0 - (cx - r):c1 - (cx - r)]
    window = field[r0:r1, c0:c1]
    return np.einsum("nkij,ij->nk", np.conj(taps), window)


def extract(img, annotation, sigmas: Sequence[float] | None = None, config: SafeConfig = SafeConfig(),
            preprocess: bool = True) -> SafeDescriptor:
    """SAFE descriptor of a normalised ROI around the annotated sclera centre.

    ``annotation`` needs ``sclera_x``, ``sclera_y`` and ``sclera_r`` in ROI
    pixels. ``sigmas`` default to ``config.base_sigmas`` scaled by the sclera
    radius. ``preprocess=False`` skips CLAHE.
    """
    img = check_gray(img)
    h, w = img.shape
    cx, cy, rs = float(annotation.sclera_x), float(annotation.sclera_y), float(annotation.sclera_r)
    if not (0 <= cx <= w - 1 and 0 <= cy <= h - 1):
        raise ExtractionError(f"sclera centre ({cx:.1f}, {cy:.1f}) outside {w}x{h} image")
    if sigmas is None:
        sigmas = scale_sigmas(config.base_sigmas, rs)
    if len(sigmas) != len(config.base_sigmas):
        raise ParameterError(f"expected {len(config.base_sigmas)} sigmas, got {len(sigmas)}")
    bank = build_filter_bank(rs, config.r_max_factor * rs, config.n_rings, config.orders)
    margin = min(cx, cy, w - 1 - cx, h - 1 - cy) + 0.5
    if bank.rings[-1].peak > margin:
        raise ExtractionError(f"outer ring peak {bank.rings[-1].peak:.1f} px exceeds image margin {margin:.1f} px")

    base = clahe(img, config.clahe_clip, config.clahe_tiles) if preprocess else img
    coeffs = np.stack([project(orientation_field(base, s), bank, (cx, cy)) for s in sigmas])
    return SafeDescriptor(tuple(sigmas), coeffs, config.params_hash(), bank.orders, rs)


def extract_from_fields(fields: Sequence[np.ndarray], center, sclera_radius: float,
                        config: SafeConfig = SafeConfig(), scales=None) -> SafeDescriptor:
    """Project precomputed orientation fields (one per scale); no preprocessing."""
    bank = build_filter_bank(sclera_radius, config.r_max_factor * sclera_radius, config.n_rings, config.orders)
    coeffs = np.stack([project(np.asarray(f, dtype=np.complex128), bank, center) for f in fields])
    scales = tuple(scales) if scales is not None else tuple(range(1, len(fields) + 1))
    return SafeDescriptor(scales, coeffs, config.params_hash(), bank.orders, sclera_radius)


# ---------------------------------------------------------------------------
# matching


def _check_compatible(ref: SafeDescriptor, test: SafeDescriptor):
    if ref.coeffs.shape != test.coeffs.shape or ref.orders != test.orders:
        raise IncompatibleDescriptorError(f"descriptor shapes differ: {ref.coeffs.shape} vs {test.coeffs.shape}")
    if ref.params_hash != test.params_hash:
        raise IncompatibleDescriptorError(f"params_hash differs: {ref.params_hash} vs {test.params_hash}")


def complex_match(ref: SafeDescriptor, test: SafeDescriptor) -> complex:
    """Normalised complex correlation M; its modulus never exceeds 1."""
    _check_compatible(ref, test)
    a, b = ref.flat(), test.flat()
    den = float(np.sum(np.abs(a) * np.abs(b)))
    if den == 0.0:
        raise UndefinedScoreError("match of an all-zero SAFE descriptor is undefined")
    return complex(np.vdot(a, b) / den)


def match(ref: SafeDescriptor, test: SafeDescriptor) -> float:
    """Match score ``|M| cos(arg M)`` in [-1, 1]; 1 for identical symmetry content."""
    m = complex_match(ref, test)
    # |M| cos(arg M) is exactly Re(M)
    return float(min(1.0, max(-1.0, m.real)))


def rotation_factors(orders, phi) -> np.ndarray:
    """Per-order multipliers ``exp(i (n + 2) phi)``; shape ``(len(phi), N_h)``."""
    n = np.asarray(orders, dtype=np.float64)
    phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    return np.exp(1j * np.outer(phi, n + 2))


def rotate_descriptor(d: SafeDescriptor, phi: float) -> SafeDescriptor:
    """Descriptor of the image rotated by ``phi`` radians (same sense as ``imgproc.rotate_image``)."""
    fac = rotation_factors(d.orders, phi)[0]
    return d.with_coeffs(d.coeffs * fac[None, :, None])


def rotation_grid(range_deg: float, step_deg: float) -> np.ndarray:
    if not step_deg > 0 or range_deg < 0:
        raise ParameterError(f"need step > 0 and range >= 0, got {step_deg}, {range_deg}")
    m = int(math.floor(range_deg / step_deg + 1e-9))
    return np.radians(np.arange(-m, m + 1) * step_deg)


def match_with_rotation(ref: SafeDescriptor, test: SafeDescriptor, range_deg: float = 15.0,
                        step_deg: float = 1.0, return_angle: bool = False):
    """Best match over test rotations on a symmetric grid that includes 0."""
    _check_compatible(ref, test)
    phis = rotation_grid(range_deg, step_deg)
    a, b = ref.coeffs, test.coeffs
    den = float(np.sum(np.abs(a) * np.abs(b)))
    if den == 0.0:
        raise UndefinedScoreError("match of an all-zero SAFE descriptor is undefined")
    # M(phi) = sum_n exp(i(n+2)phi) * sum_{scale,ring} conj(a) b
    per_order = np.einsum("snk,snk->n", np.conj(a), b)
    scores = (rotation_factors(ref.orders, phis) @ per_order).real / den
    best = int(np.argmax(scores))
    score = float(min(1.0, max(-1.0, scores[best])))
    return (score, float(phis[best])) if return_angle else score

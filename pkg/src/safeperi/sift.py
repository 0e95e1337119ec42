"""DoG keypoints, 128-d gradient descriptors, matching and match-count scores.

Coordinates are (x, y) = (col, row) in input-image pixels; orientations are
measured in the array frame, ``atan2(d/drow, d/dcol)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .errors import ParameterError
from .imgproc import check_gray

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SiftParams:
    sigma0: float = 1.6
    scales_per_octave: int = 3
    assumed_blur: float = 0.5
    min_side: int = 16
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    border: int = 5
    orientation_bins: int = 36
    orientation_peak: float = 0.8
    descriptor_clamp: float = 0.2
    ratio: float = 0.8
    gate_angle_deg: float = 20.0
    gate_length: float = 0.15
    gate_min_shift: float = 0.02
    norm: str = "min"

    def __post_init__(self):
        if self.norm not in ("min", "avg"):
            raise ParameterError(f"norm must be 'min' or 'avg', got {self.norm!r}")
        if not 0 < self.ratio <= 1:
            raise ParameterError("ratio must be in (0, 1]")


@dataclass
class SiftKeypoint:
    x: float
    y: float
    scale: float
    orientation: float
    descriptor: Optional[np.ndarray] = field(default=None, repr=False)
    # pyramid position, needed to sample the descriptor
    octave: int = 0
    layer: int = 1
    octave_sigma: float = 1.6
    response: float = 0.0

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "scale": self.scale, "orientation": self.orientation,
                "desc": [] if self.descriptor is None else [float(v) for v in self.descriptor]}

    @classmethod
    def from_json(cls, obj: dict) -> "SiftKeypoint":
        desc = obj.get("desc")
        return cls(float(obj["x"]), float(obj["y"]), float(obj["scale"]), float(obj["orientation"]),
                   np.asarray(desc, dtype=np.float64) if desc else None)


# ---------------------------------------------------------------------------
# scale space


@dataclass
class Octave:
    gauss: list
    dog: np.ndarray  # (S + 2, H, W)
    grads: list = field(default_factory=list)  # per gauss level: (gx, gy)


def build_pyramid(img: np.ndarray, p: SiftParams) -> list:
    s = p.scales_per_octave
    k = 2.0 ** (1.0 / s)
    base = ndimage.gaussian_filter(img, math.sqrt(p.sigma0**2 - p.assumed_blur**2), mode="nearest")
    octaves = []
    while min(base.shape) >= p.min_side:
        gauss = [base]
        for i in range(1, s + 3):
            prev, cur = p.sigma0 * k ** (i - 1), p.sigma0 * k**i
            gauss.append(ndimage.gaussian_filter(gauss[-1], math.sqrt(cur**2 - prev**2), mode="nearest"))
        dog = np.stack([gauss[i + 1] - gauss[i] for i in range(s + 2)])
        grads = []
        for g in gauss:
            pad = np.pad(g, 1, mode="edge")
            grads.append((pad[1:-1, 2:] - pad[1:-1, :-2], pad[2:, 1:-1] - pad[:-2, 1:-1]))
        octaves.append(Octave(gauss, dog, grads))
        base = gauss[s][::2, ::2]
    return octaves


def _derivatives(dog, l, r, c):
    d = dog
    g = 0.5 * np.array([d[l, r, c + 1] - d[l, r, c - 1],
                        d[l, r + 1, c] - d[l, r - 1, c],
                        d[l + 1, r, c] - d[l - 1, r, c]])
    v = d[l, r, c]
    dxx = d[l, r, c + 1] + d[l, r, c - 1] - 2 * v
    dyy = d[l, r + 1, c] + d[l, r - 1, c] - 2 * v
    dss = d[l + 1, r, c] + d[l - 1, r, c] - 2 * v
    dxy = 0.25 * (d[l, r + 1, c + 1] - d[l, r + 1, c - 1] - d[l, r - 1, c + 1] + d[l, r - 1, c - 1])
    dxs = 0.25 * (d[l + 1, r, c + 1] - d[l + 1, r, c - 1] - d[l - 1, r, c + 1] + d[l - 1, r, c - 1])
    dys = 0.25 * (d[l + 1, r + 1, c] - d[l + 1, r - 1, c] - d[l - 1, r + 1, c] + d[l - 1, r - 1, c])
    hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    return g, hess


def _refine(dog, l, r, c, p: SiftParams):
    """Quadratic sub-pixel refinement; returns (layer, row, col, offset, value) or None."""
    n_layers, h, w = dog.shape
    visited = set()
    for _ in range(5):
        g, hess = _derivatives(dog, l, r, c)
        try:
            off = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(off) < 0.5):
            break
        visited.add((l, r, c))
        move = np.round(off).astype(int)
        if (l + move[2], r + move[1], c + move[0]) in visited:
            # extremum midway between samples: the step would bounce back, keep this sample
            if np.all(np.abs(off) <= 0.6):
                break
            return None
        c, r, l = c + move[0], r + move[1], l + move[2]
        if not (1 <= l <= n_layers - 2 and p.border <= r < h - p.border and p.border <= c < w - p.border):
            return None
    else:
        return None
    value = dog[l, r, c] + 0.5 * float(g @ off)
    if abs(value) < p.contrast_threshold:
        return None
    dxx, dyy, dxy = hess[0, 0], hess[1, 1], hess[0, 1]
    tr, det = dxx + dyy, dxx * dyy - dxy * dxy
    if det <= 0 or tr * tr * p.edge_ratio >= (p.edge_ratio + 1) ** 2 * det:
        return None
    return l, r, c, off, value


def _orientations(octave: Octave, layer: int, row: int, col: int, sigma: float, p: SiftParams):
    gx, gy = octave.grads[layer]
    h, w = gx.shape
    ws = 1.5 * sigma
    rad = int(round(3 * ws))
    r0, r1 = max(row - rad, 1), min(row + rad + 1, h - 1)
    c0, c1 = max(col - rad, 1), min(col + rad + 1, w - 1)
    dy, dx = np.mgrid[r0 - row:r1 - row, c0 - col:c1 - col]
    sx, sy = gx[r0:r1, c0:c1], gy[r0:r1, c0:c1]
    weight = np.exp(-(dx * dx + dy * dy) / (2 * ws * ws)) * np.hypot(sx, sy)
    nb = p.orientation_bins
    ang = np.mod(np.arctan2(sy, sx), 2 * np.pi)
    bins = np.minimum((ang * nb / (2 * np.pi)).astype(np.int64), nb - 1)
    hist = np.bincount(bins.ravel(), weights=weight.ravel(), minlength=nb)
    hist = (np.roll(hist, 2) + np.roll(hist, -2)) / 16 + (np.roll(hist, 1) + np.roll(hist, -1)) * 4 / 16 + hist * 6 / 16
    peak = hist.max()
    if peak <= 0:
        return []
    out = []
    for i in range(nb):
        left, right = hist[(i - 1) % nb], hist[(i + 1) % nb]
        if hist[i] > left and hist[i] > right and hist[i] >= p.orientation_peak * peak:
            shift = 0.5 * (left - right) / (left - 2 * hist[i] + right)
            out.append(float(np.mod((i + 0.5 + shift) * 2 * np.pi / nb, 2 * np.pi)))
    return out


def detect_keypoints(img, params: SiftParams = SiftParams(), _pyramid=None) -> list:
    """DoG extrema with sub-pixel refinement, contrast/edge rejection and dominant orientations.

    Images smaller than 32x32 yield an empty list (logged).
    """
    img = check_gray(img)
    p = params
    if min(img.shape) < 32:
        log.warning("image %s too small for SIFT detection", img.shape)
        return []
    pyramid = _pyramid if _pyramid is not None else build_pyramid(img, p)
    s = p.scales_per_octave
    keypoints = []
    for o, octave in enumerate(pyramid):
        dog = octave.dog
        _, h, w = dog.shape
        if h <= 2 * p.border or w <= 2 * p.border:
            continue
        mx = ndimage.maximum_filter(dog, size=3, mode="nearest")
        mn = ndimage.minimum_filter(dog, size=3, mode="nearest")
        cand = ((dog == mx) | (dog == mn)) & (np.abs(dog) > 0.5 * p.contrast_threshold)
        cand[0] = cand[-1] = False
        cand[:, :p.border] = cand[:, h - p.border:] = False
        cand[:, :, :p.border] = cand[:, :, w - p.border:] = False
        seen = {}
        for l, r, c in zip(*np.nonzero(cand)):
            res = _refine(dog, int(l), int(r), int(c), p)
            if res is None:
                continue
            l2, r2, c2, off, value = res
            fr, fc = r2 + off[1], c2 + off[0]
            # tied neighbouring samples refine onto the same extremum; keep it once
            if any(abs(fr - a) <= 1.0 and abs(fc - b) <= 1.0 for a, b in seen.get(l2, ())):
                continue
            seen.setdefault(l2, []).append((fr, fc))
            oct_sigma = p.sigma0 * 2.0 ** ((l2 + off[2]) / s)
            factor = 2.0**o
            x, y = (c2 + off[0]) * factor, (r2 + off[1]) * factor
            for theta in _orientations(octave, l2, r2, c2, oct_sigma, p):
                keypoints.append(SiftKeypoint(float(x), float(y), float(oct_sigma * factor), theta,
                                              octave=o, layer=l2, octave_sigma=float(oct_sigma),
                                              response=float(abs(value))))
    return keypoints


# ---------------------------------------------------------------------------
# descriptors

_GRID = 16
_CELL = 4
_OBINS = 8


def _descriptor(octave: Octave, kp: SiftKeypoint, p: SiftParams):
    gx, gy = octave.grads[kp.layer]
    h, w = gx.shape
    factor = 2.0**kp.octave
    xo, yo = kp.x / factor, kp.y / factor
    spacing = 3.0 * kp.octave_sigma / _CELL
    idx = np.arange(_GRID) - (_GRID - 1) / 2.0
    v, u = np.meshgrid(idx, idx, indexing="ij")  # v along rows of the patch, u along columns
    cos_t, sin_t = math.cos(kp.orientation), math.sin(kp.orientation)
    cols = xo + spacing * (u * cos_t - v * sin_t)
    rows = yo + spacing * (u * sin_t + v * cos_t)
    if cols.min() < 1 or rows.min() < 1 or cols.max() > w - 2 or rows.max() > h - 2:
        return None
    coords = np.stack([rows.ravel(), cols.ravel()])
    sx = ndimage.map_coordinates(gx, coords, order=1)
    sy = ndimage.map_coordinates(gy, coords, order=1)
    weight = np.exp(-(u * u + v * v).ravel() / (2 * (_GRID / 2.0) ** 2))
    mag = np.hypot(sx, sy) * weight
    ang = np.mod(np.arctan2(sy, sx) - kp.orientation, 2 * np.pi)

    cr = (v.ravel() + (_GRID - 1) / 2.0 + 0.5) / _CELL - 0.5
    cc = (u.ravel() + (_GRID - 1) / 2.0 + 0.5) / _CELL - 0.5
    ob = ang * _OBINS / (2 * np.pi)
    r0, c0, o0 = np.floor(cr).astype(int), np.floor(cc).astype(int), np.floor(ob).astype(int)
    fr, fc, fo = cr - r0, cc - c0, ob - o0
    hist = np.zeros((_CELL, _CELL, _OBINS))
    for dr in (0, 1):
        wr = fr if dr else 1 - fr
        ri = r0 + dr
        for dc in (0, 1):
            wc = fc if dc else 1 - fc
            ci = c0 + dc
            ok = (ri >= 0) & (ri < _CELL) & (ci >= 0) & (ci < _CELL)
            for do in (0, 1):
                wo = fo if do else 1 - fo
                oi = (o0 + do) % _OBINS
                np.add.at(hist, (ri[ok], ci[ok], oi[ok]), (mag * wr * wc * wo)[ok])
    vec = hist.ravel()
    if not np.any(vec > 0):
        return None
    return clamp_unit(vec, p.descriptor_clamp)


def clamp_unit(vec, clamp: float = 0.2) -> np.ndarray:
    """Unit-norm vector proportional to ``min(vec, c)``, with ``c`` chosen so no component exceeds ``clamp``.

    A single clamp-then-renormalise pass pushes clamped entries back above
    ``clamp``; solving for the cap directly avoids that. With fewer than
    ``1 / clamp**2`` nonzero entries the bound is unreachable and the plain
    unit vector is clamped once instead.
    """
    v = np.asarray(vec, dtype=np.float64)
    v = v / np.linalg.norm(v)
    if v.max() <= clamp:
        return v
    n_cap = 1.0 / clamp**2
    if np.count_nonzero(v) < n_cap:
        w = np.minimum(v, clamp)
        return w / np.linalg.norm(w)
    desc = np.sort(v)[::-1]
    rest = np.cumsum((desc**2)[::-1])[::-1]  # rest[m] = sum of squares from position m on
    for m in range(1, min(desc.size, math.ceil(n_cap))):
        # m largest entries capped at c: m c^2 + rest[m] = c^2 / clamp^2
        c = math.sqrt(rest[m] / (n_cap - m))
        if desc[m] <= c <= desc[m - 1]:
            break
    w = np.minimum(v, c)
    return w / np.linalg.norm(w)


def compute_descriptors(img, keypoints: Sequence[SiftKeypoint], params: SiftParams = SiftParams(),
                        _pyramid=None) -> list:
    """Attach 128-d descriptors; keypoints whose sample window leaves the image are dropped."""
    img = check_gray(img)
    pyramid = _pyramid if _pyramid is not None else build_pyramid(img, params)
    out = []
    dropped = 0
    for kp in keypoints:
        desc = _descriptor(pyramid[kp.octave], kp, params)
        if desc is None:
            dropped += 1
            continue
        out.append(SiftKeypoint(kp.x, kp.y, kp.scale, kp.orientation, desc, kp.octave, kp.layer,
                                kp.octave_sigma, kp.response))
    if dropped:
        log.debug("dropped %d keypoint(s) with windows outside the image", dropped)
    return out


def describe(img, params: SiftParams = SiftParams()) -> list:
    """Detect keypoints and compute their descriptors in one pass over the pyramid."""
    img = check_gray(img)
    if min(img.shape) < 32:
        log.warning("image %s too small for SIFT detection", img.shape)
        return []
    pyramid = build_pyramid(img, params)
    kps = detect_keypoints(img, params, _pyramid=pyramid)
    return compute_descriptors(img, kps, params, _pyramid=pyramid)


# ---------------------------------------------------------------------------
# matching


def _descriptor_matrix(kps):
    return np.array([k.descriptor for k in kps], dtype=np.float64).reshape(len(kps), -1)


def match_keypoints(a: Sequence[SiftKeypoint], b: Sequence[SiftKeypoint], ratio: float = 0.8) -> list:
    """One-to-one nearest-neighbour matches passing the ratio test.

    Returns ``(index_a, index_b, distance)`` triples. Zero-distance matches
    always pass; among equally near candidates the one with the same index is
    preferred, so a list matched with itself pairs every keypoint with itself.
    """
    if len(a) == 0 or len(b) == 0:
        return []
    dist = cdist(_descriptor_matrix(a), _descriptor_matrix(b))
    n_b = dist.shape[1]
    candidates = []
    for i, row in enumerate(dist):
        j = int(np.argmin(row))
        if i < n_b and row[i] == row[j]:
            j = i
        d1 = row[j]
        if n_b > 1:
            d2 = np.min(np.delete(row, j))
            if d1 != 0 and not d1 < ratio * d2:
                continue
        candidates.append((float(d1), i, j))
    candidates.sort()
    used_a, used_b, pairs = set(), set(), []
    for d, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j, d))
    return pairs


def _displacements(pairs, kps_a, kps_b, dims_a, dims_b):
    """Per-pair displacement in units of each image's diagonal, positions taken from the image centre."""
    def norm_pos(kp, dims):
        hgt, wid = dims
        diag = math.hypot(hgt, wid)
        return ((kp.x - (wid - 1) / 2) / diag, (kp.y - (hgt - 1) / 2) / diag)
    out = np.zeros((len(pairs), 2))
    for n, (i, j, _) in enumerate(pairs):
        pa, pb = norm_pos(kps_a[i], dims_a), norm_pos(kps_b[j], dims_b)
        out[n] = (pb[0] - pa[0], pb[1] - pa[1])
    return out


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def gate_mask(disp: np.ndarray, angle_deg: float, length_frac: float, min_shift: float) -> np.ndarray:
    """One pass of the angle/length gates around the median displacement."""
    length = np.hypot(disp[:, 0], disp[:, 1])
    keep = np.abs(length - np.median(length)) <= length_frac
    moving = length > min_shift
    if moving.any():
        ang = np.arctan2(disp[moving, 1], disp[moving, 0])
        ref = math.atan2(np.sin(ang).sum(), np.cos(ang).sum())
        med = ref + np.median(_wrap(ang - ref))
        ok = np.abs(_wrap(ang - med)) <= math.radians(angle_deg)
        keep[moving] &= ok
    return keep


def geometric_filter(pairs, kps_a, kps_b, dims_a, dims_b, params: SiftParams = SiftParams()) -> list:
    """Drop matches inconsistent with the median displacement, iterated to a fixed point.

    A pair survives when its displacement length is within ``gate_length`` (in
    image diagonals) of the median length and, if it moves more than
    ``gate_min_shift``, its direction is within ``gate_angle_deg`` of the
    median direction.
    """
    pairs = list(pairs)
    if len(pairs) <= 1:
        return pairs
    while pairs:
        disp = _displacements(pairs, kps_a, kps_b, dims_a, dims_b)
        keep = gate_mask(disp, params.gate_angle_deg, params.gate_length, params.gate_min_shift)
        if keep.all():
            break
        pairs = [pr for pr, k in zip(pairs, keep) if k]
    return pairs


def sift_score(n_matches: int, n_a: int, n_b: int, norm: str = "min"):
    """Match count normalised by the min or mean keypoint count; returns (score, degenerate)."""
    if min(n_a, n_b) <= 0:
        return 0.0, True
    if norm == "min":
        return n_matches / min(n_a, n_b), False
    if norm == "avg":
        return n_matches / ((n_a + n_b) / 2.0), False
    raise ParameterError(f"unknown normalisation {norm!r}")


def compare(kps_a, kps_b, dims_a, dims_b, params: SiftParams = SiftParams()):
    """Full SIFT comparison of two described images; returns (score, degenerate)."""
    pairs = match_keypoints(kps_a, kps_b, params.ratio)
    if pairs:
        pairs = geometric_filter(pairs, kps_a, kps_b, dims_a, dims_b, params)
    return sift_score(len(pairs), len(kps_a), len(kps_b), params.norm)

"""Block-grid LBP and HOG descriptors with Euclidean and chi-square matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IncompatibleDescriptorError, ParameterError
from .imgproc import check_gray

N_BINS = 8
GRID = 8
CORNERS = ((0, 0), (0, GRID - 1), (GRID - 1, 0), (GRID - 1, GRID - 1))


@dataclass(frozen=True)
class BlockGrid:
    side: int
    edges: tuple  # GRID + 1 boundaries, shared by rows and columns
    active: tuple  # (row, col) of the blocks that carry histograms, row-major

    def block_slices(self):
        for r, c in self.active:
            yield (slice(self.edges[r], self.edges[r + 1]), slice(self.edges[c], self.edges[c + 1]))

    def block_index_map(self) -> np.ndarray:
        """Active-block index per pixel, -1 for inactive corners."""
        out = np.full((self.side, self.side), -1, dtype=np.int64)
        for i, (rs, cs) in enumerate(self.block_slices()):
            out[rs, cs] = i
        return out


def block_grid(roi_side: int) -> BlockGrid:
    """8x8 block layout over a square ROI; the last row/column absorbs the remainder."""
    roi_side = int(roi_side)
    if roi_side < GRID:
        raise ParameterError(f"ROI side {roi_side} too small for an {GRID}x{GRID} grid")
    size = roi_side // GRID
    edges = tuple(i * size for i in range(GRID)) + (roi_side,)
    active = tuple((r, c) for r in range(GRID) for c in range(GRID) if (r, c) not in CORNERS)
    return BlockGrid(roi_side, edges, active)


@dataclass(frozen=True, eq=False)
class BlockDescriptor:
    matcher: str
    grid: BlockGrid
    histograms: np.ndarray  # (n_active, 8), L1-normalised rows or zeros
    empty: np.ndarray  # (n_active,) bool

    @property
    def vector(self) -> np.ndarray:
        return self.histograms.ravel()

    def to_json(self) -> dict:
        return {
            "matcher": self.matcher,
            "roi_side": self.grid.side,
            "active_blocks": [list(b) for b in self.grid.active],
            "histograms": self.histograms.tolist(),
            "empty": [bool(e) for e in self.empty],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BlockDescriptor":
        grid = block_grid(obj["roi_side"])
        if [list(b) for b in grid.active] != [list(b) for b in obj["active_blocks"]]:
            raise ParameterError("active block list does not match the default grid")
        return cls(obj["matcher"], grid, np.asarray(obj["histograms"], dtype=np.float64),
                   np.asarray(obj["empty"], dtype=bool))


def _square(img) -> np.ndarray:
    img = check_gray(img)
    if img.shape[0] != img.shape[1]:
        raise ParameterError(f"block descriptors need a square ROI, got {img.shape}")
    return img


def _block_histograms(index_map, bins, weights, n_blocks):
    valid = index_map >= 0
    flat = index_map[valid] * N_BINS + bins[valid]
    raw = np.bincount(flat, weights=None if weights is None else weights[valid],
                      minlength=n_blocks * N_BINS).astype(np.float64)
    return raw.reshape(n_blocks, N_BINS)


def _normalise(raw):
    mass = raw.sum(axis=1)
    empty = mass <= 0
    hist = np.zeros_like(raw)
    hist[~empty] = raw[~empty] / mass[~empty, None]
    return hist, empty


# neighbour offsets (drow, dcol) for bits 0..7: E, NE, N, NW, W, SW, S, SE
LBP_NEIGHBOURS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


def lbp_labels(img) -> np.ndarray:
    """8-bit LBP label of every interior pixel (border pixels get -1).

    Bit ``b`` is set when neighbour ``b`` is >= the centre.
    """
    img = check_gray(img)
    h, w = img.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    if h < 3 or w < 3:
        return labels
    centre = img[1:-1, 1:-1]
    acc = np.zeros(centre.shape, dtype=np.int64)
    for bit, (dr, dc) in enumerate(LBP_NEIGHBOURS):
        nb = img[1 + dr:h - 1 + dr, 1 + dc:w - 1 + dc]
        acc |= (nb >= centre).astype(np.int64) << bit
    labels[1:-1, 1:-1] = acc
    return labels


def extract_lbp(img, grid: BlockGrid | None = None) -> BlockDescriptor:
    img = _square(img)
    grid = grid or block_grid(img.shape[0])
    labels = lbp_labels(img)
    index_map = grid.block_index_map()
    index_map[labels < 0] = -1
    raw = _block_histograms(index_map, np.maximum(labels, 0) // 32, None, len(grid.active))
    hist, empty = _normalise(raw)
    return BlockDescriptor("lbp", grid, hist, empty)


def gradients(img):
    """Central differences with [-1, 0, 1] in both directions, replicate borders."""
    p = np.pad(img, 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gx, gy


def hog_raw(img, grid: BlockGrid):
    """Unnormalised per-block orientation histograms (magnitude-weighted, hard binning)."""
    gx, gy = gradients(img)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((theta / (np.pi / N_BINS)).astype(np.int64), N_BINS - 1)
    return _block_histograms(grid.block_index_map(), bins, mag, len(grid.active))


def extract_hog(img, grid: BlockGrid | None = None) -> BlockDescriptor:
    img = _square(img)
    grid = grid or block_grid(img.shape[0])
    hist, empty = _normalise(hog_raw(img, grid))
    return BlockDescriptor("hog", grid, hist, empty)


def distance(a: BlockDescriptor, b: BlockDescriptor, metric: str = "chi2") -> float:
    """Euclidean or chi-square distance between concatenated block histograms."""
    # ROIs of different sides share the relative 8x8 layout, so only the block set must agree
    if a.matcher != b.matcher or a.grid.active != b.grid.active or a.histograms.shape != b.histograms.shape:
        raise IncompatibleDescriptorError(f"cannot compare {a.matcher}/{a.grid.side} with {b.matcher}/{b.grid.side}")
    u, v = a.vector, b.vector
    if metric == "euclidean":
        return float(np.sqrt(np.sum((u - v) ** 2)))
    if metric == "chi2":
        s = u + v
        keep = s >= 1e-12
        return float(np.sum((u[keep] - v[keep]) ** 2 / s[keep]))
    raise ParameterError(f"unknown metric {metric!r}")


def similarity(a: BlockDescriptor, b: BlockDescriptor, metric: str = "chi2") -> float:
    return -distance(a, b, metric)

"""Low-level image operations.

Gray images are plain 2-D ``float64`` arrays with values in [0, 1]; complex
fields are 2-D ``complex128`` arrays of the same shape. Kernel geometry uses
a Cartesian frame centred on the middle tap, x to the right and y *upward*
(so a tap at array offset ``(drow, dcol)`` sits at ``x = dcol, y = -drow``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage, signal

from .errors import InputError, ParameterError

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def check_gray(img) -> np.ndarray:
    """Validate a gray image and return it as a float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise InputError(f"expected a non-empty 2-D gray image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("gray image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError("gray image values must lie in [0, 1]")
    return arr


def _unit_scale(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.bool_:
        return arr.astype(np.float64)
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.float64) / float(np.iinfo(arr.dtype).max)
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def to_grayscale(image) -> np.ndarray:
    """Convert a raster (H×W, H×W×1, H×W×3 or H×W×4) to a [0, 1] gray image.

    Integer rasters are scaled by their dtype's maximum, float rasters are
    taken to be in [0, 1] already. Alpha channels are ignored.
    """
    arr = np.asarray(image)
    if arr.size == 0 or arr.ndim not in (2, 3) or 0 in arr.shape:
        raise InputError(f"cannot convert raster of shape {arr.shape} to gray")
    arr = _unit_scale(arr)
    if arr.ndim == 2:
        return arr
    channels = arr.shape[2]
    if channels == 1:
        return arr[:, :, 0]
    if channels in (3, 4):
        w = LUMA_WEIGHTS
        r, g, b = arr[:, :, 0], arr[:, :, 1], arr[:, :, 2]
        # weights sum to 1, so writing it as an offset from b keeps gray inputs exact
        out = b + w[0] * (r - b) + w[1] * (g - b)
        return np.clip(out, 0.0, 1.0)
    raise InputError(f"unsupported channel count {channels}")


# ---------------------------------------------------------------------------
# CLAHE


def clahe(img, clip_limit: float = 0.01, tiles=(8, 8), nbins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation.

    ``clip_limit`` is a fraction of the tile pixel count: each histogram bin
    is capped at ``clip_limit * tile_pixels`` and the clipped excess is spread
    evenly over all bins. Tile mappings are the (clipped) cumulative
    histograms, blended bilinearly between tile centres. Images whose size is
    not a multiple of the tile grid are symmetrically padded and cropped back.
    """
    img = check_gray(img)
    if not clip_limit > 0:
        raise ParameterError(f"clip_limit must be positive, got {clip_limit}")
    ty, tx = (int(t) for t in tiles)
    if ty < 1 or tx < 1:
        raise ParameterError(f"tile grid must be at least 1x1, got {tiles}")
    h, w = img.shape
    th, tw = -(-h // ty), -(-w // tx)
    ph, pw = th * ty, tw * tx
    padded = np.pad(img, ((0, ph - h), (0, pw - w)), mode="symmetric")

    bins = np.minimum((padded * nbins).astype(np.int64), nbins - 1)
    tile_id = (np.arange(ph) // th)[:, None] * tx + (np.arange(pw) // tw)[None, :]
    hist = np.bincount((tile_id * nbins + bins).ravel(), minlength=ty * tx * nbins)
    hist = hist.reshape(ty, tx, nbins).astype(np.float64)

    npix = th * tw
    cap = clip_limit * npix
    excess = np.maximum(hist - cap, 0.0).sum(axis=2, keepdims=True)
    hist = np.minimum(hist, cap) + excess / nbins
    maps = np.cumsum(hist, axis=2) / npix

    def _axis(n, tile, count):
        f = (np.arange(n) + 0.5) / tile - 0.5
        i0 = np.floor(f).astype(np.int64)
        wgt = np.clip(f - i0, 0.0, 1.0)
        lo = np.clip(i0, 0, count - 1)
        hi = np.clip(i0 + 1, 0, count - 1)
        wgt = np.where(i0 < 0, 0.0, np.where(i0 >= count - 1, 0.0, wgt))
        return lo, hi, wgt

    ylo, yhi, wy = _axis(ph, th, ty)
    xlo, xhi, wx = _axis(pw, tw, tx)
    Y, X = ylo[:, None], xlo[None, :]
    Y1, X1 = yhi[:, None], xhi[None, :]
    WY, WX = wy[:, None], wx[None, :]
    # lerp form: tiles with identical mappings blend to exactly that mapping
    top = maps[Y, X, bins] + WX * (maps[Y, X1, bins] - maps[Y, X, bins])
    bottom = maps[Y1, X, bins] + WX * (maps[Y1, X1, bins] - maps[Y1, X, bins])
    out = top + WY * (bottom - top)
    return np.clip(out[:h, :w], 0.0, 1.0)


# ---------------------------------------------------------------------------
# resampling


def cubic_kernel(t, a: float = -0.5):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    inner = (a + 2) * t3 - (a + 3) * t2 + 1
    outer = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, inner, np.where(t < 2, outer, 0.0))


def _cubic_matrix(n_in: int, n_out: int, scale: float) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for offset in (-1, 0, 1, 2):
        idx = np.clip(i0 + offset, 0, n_in - 1)
        np.add.at(mat, (rows, idx), cubic_kernel(t - offset))
    return mat


def scaled_shape(shape, scale: float):
    return tuple(int(math.floor(scale * n + 0.5)) for n in shape)


def bicubic_resize(img, scale: float) -> np.ndarray:
    """Resize by ``scale`` with cubic convolution (a = -0.5), replicate borders.

    Output pixel ``j`` samples the source at ``(j + 0.5) / scale - 0.5``.
    """
    img = check_gray(img)
    if not scale > 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    out_h, out_w = scaled_shape(img.shape, scale)
    if out_h < 4 or out_w < 4:
        raise ParameterError(f"resized image would be {out_h}x{out_w}, below 4x4")
    wy = _cubic_matrix(img.shape[0], out_h, scale)
    wx = _cubic_matrix(img.shape[1], out_w, scale)
    return np.clip(wy @ img @ wx.T, 0.0, 1.0)


def rotate_image(img, phi: float, center=None, order: int = 3) -> np.ndarray:
    """Rotate by ``phi`` radians about ``center`` (row, col), default the image centre.

    Positive angles rotate from the +col axis toward the +row axis, i.e.
    clockwise as displayed. Samples falling outside the source replicate the
    nearest border pixel.
    """
    img = check_gray(img)
    h, w = img.shape
    if center is None:
        center = ((h - 1) / 2.0, (w - 1) / 2.0)
    c, s = math.cos(phi), math.sin(phi)
    # output (row, col) -> input (row, col): inverse rotation
    mat = np.array([[c, -s], [s, c]])
    ctr = np.asarray(center, dtype=np.float64)
    offset = ctr - mat @ ctr
    out = ndimage.affine_transform(img, mat, offset=offset, order=order, mode="nearest")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# complex kernels and convolution


@dataclass(frozen=True, eq=False)
class ComplexKernel:
    taps: np.ndarray
    order: int
    sigma: float
    # ring parameters for annular filters: peak radius, width exponent, radial scale, norm constant
    ring: Optional[dict] = field(default=None)

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.complex128)
        if taps.ndim != 2 or taps.shape[0] != taps.shape[1] or taps.shape[0] % 2 == 0:
            raise ParameterError(f"kernel must be square with odd side, got {taps.shape}")
        if not np.all(np.isfinite(taps)):
            raise ParameterError("kernel taps must be finite")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @property
    def side(self) -> int:
        return self.taps.shape[0]

    @property
    def radius(self) -> int:
        return self.side // 2


def kernel_grid(side: int):
    """Cartesian (x, y) coordinates of every tap of an odd ``side`` kernel."""
    r = side // 2
    rows, cols = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    return cols, -rows


def gaussian(x, y, sigma: float):
    return np.exp(-(x * x + y * y) / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)


def gamma_kernel(n: int, sigma: float, side: Optional[int] = None) -> ComplexKernel:
    """Symmetry derivative of a Gaussian, sampled from its closed form.

    ``(Dx + iDy)^n g = (-1/sigma^2)^n (x + iy)^n g`` for n >= 0 and the
    conjugate expression for n < 0. For n != 0 the residual DC left by the
    square truncation (nonzero only when n is a multiple of 4) is removed by
    subtracting a matching multiple of the Gaussian envelope.
    """
    n = int(n)
    if abs(n) > 8:
        raise ParameterError(f"|n| must be <= 8, got {n}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    min_side = 2 * math.ceil(4 * sigma) + 1
    side = min_side if side is None else int(side)
    if side < min_side or side % 2 == 0:
        raise ParameterError(f"kernel side must be odd and >= {min_side}, got {side}")
    x, y = kernel_grid(side)
    g = gaussian(x, y, sigma)
    z = x + 1j * y if n >= 0 else x - 1j * y
    taps = (-1.0 / sigma**2) ** abs(n) * z ** abs(n) * g
    if n != 0:
        taps = taps - taps.sum() / g.sum() * g
    return ComplexKernel(taps, n, float(sigma))


def convolve_complex(field, kernel: ComplexKernel) -> np.ndarray:
    """Scalar product of ``kernel`` with ``field`` centred at every pixel.

    ``out[p] = sum_d conj(k[d]) * field[p + d]``, i.e. correlation with the
    conjugated kernel, with replicate borders. Evaluated by FFT.
    """
    arr = np.asarray(field)
    if arr.ndim != 2 or arr.size == 0:
        raise InputError(f"expected a 2-D field, got shape {arr.shape}")
    if kernel.side > min(arr.shape):
        raise InputError(f"kernel side {kernel.side} exceeds image shape {arr.shape}")
    r = kernel.radius
    padded = np.pad(arr, r, mode="edge")
    flipped = np.conj(kernel.taps)[::-1, ::-1]
    return signal.fftconvolve(padded, flipped, mode="valid").astype(np.complex128)


def orientation_field(img, sigma: float) -> np.ndarray:
    """Complex orientation field: the squared first-order symmetry derivative response.

    The argument is twice the gradient direction measured in array
    coordinates (col right, row down); the modulus is the squared gradient
    energy at inner scale ``sigma``.
    """
    img = check_gray(img)
    grad = convolve_complex(img, gamma_kernel(1, sigma))
    return grad * grad

"""PNG/PGM reading and 8-bit PNG writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .imgproc import check_gray, to_grayscale


def read_image(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG/PGM (gray or colour) as a [0, 1] gray image."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    if mode == "I":
        # Pillow widens 16-bit PGM/PNG to int32, already rescaled to 0..65535
        return np.clip(arr.astype(np.float64) / 65535.0, 0.0, 1.0)
    if mode == "F":
        return np.clip(arr.astype(np.float64), 0.0, 1.0)
    return to_grayscale(arr)


def to_uint8(img) -> np.ndarray:
    return np.round(check_gray(img) * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)

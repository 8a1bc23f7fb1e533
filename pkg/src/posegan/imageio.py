"""8-bit <-> [-1, 1] image conversion and PNG I/O.

The affine map is fixed (``v / 127.5 - 1`` and its inverse rounded half-up)
so that metrics computed on decoded files are bit-reproducible.
"""
from pathlib import Path

import numpy as np
from PIL import Image


def to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    v = np.floor((np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return to_float(np.asarray(im.convert("RGB"), dtype=np.uint8))


def save_image(path, img: np.ndarray) -> None:
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)

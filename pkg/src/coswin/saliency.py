"""Grad-CAM on the final normalisation layer and PGM export."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .exceptions import DataError, FormatError, ShapeError
from .model import CoSwinModel
from .tensor import Tensor


def grad_cam(model: CoSwinModel, image: np.ndarray,
             target: Optional[int] = None) -> Tuple[np.ndarray, int]:
    """Class activation map over the final-norm token grid.

    ``image`` is one normalised [H, W, C] input. Channel weights are the
    spatial mean of d(logit)/d(activations); the map is relu(sum_c w_c A_c)
    at the token resolution. ``target`` defaults to the predicted class.
    Returns (map [h, w], target class).
    """
    with T.no_grad():
        x, h, w = model.forward_features(image[None])
        normed = model.final_norm(x).data
    acts = Tensor(normed, requires_grad=True)
    logits = model.head_from_normed(acts)
    if target is None:
        target = int(np.argmax(logits.data[0]))
    pick = np.zeros(logits.shape, dtype=logits.dtype)
    pick[0, target] = 1.0
    grads = T.backward(T.tsum(T.mul(logits, Tensor(pick))), accumulate=False)
    g = grads[acts][0]
    weights = g.mean(axis=0)
    cam = np.maximum(normed[0] @ weights, 0.0)
    return cam.reshape(h, w).astype(np.float64), target


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D map with half-pixel-centre bilinear interpolation, edges clamped."""
    h, w = grid.shape

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(out_h, h)
    x0, x1, fx = axis(out_w, w)
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bottom = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def to_uint8(saliency: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255. A constant map (zero range) becomes all zeros."""
    lo, hi = float(saliency.min()), float(saliency.max())
    if hi - lo <= 0.0:
        return np.zeros(saliency.shape, dtype=np.uint8)
    return np.rint((saliency - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def saliency_map(model: CoSwinModel, image: np.ndarray,
                 target: Optional[int] = None) -> Tuple[np.ndarray, int]:
    """Grad-CAM upsampled to the input resolution as uint8 [H, W]."""
    cam, cls = grad_cam(model, image, target)
    H, W = image.shape[:2]
    return to_uint8(bilinear_upsample(cam, H, W)), cls


def write_pgm(path, image: np.ndarray) -> None:
    """Binary greyscale PGM ("P5", maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ShapeError(f"PGM needs a 2-D uint8 array, got {image.shape} {image.dtype}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != b"P5" or fields[3] != b"255":
        raise FormatError(f"{path}: only binary 8-bit PGM is supported")
    w, h = int(fields[1]), int(fields[2])
    data = raw[pos:pos + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def load_image(path, size: Tuple[int, int], channels: int) -> np.ndarray:
    """Read an image file as float32 [H, W, C] in [0, 1]; its size must match ``size``."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[:2] != tuple(size):
        raise DataError(f"image {path} is {arr.shape[1]}x{arr.shape[0]}, "
                        f"model expects {size[1]}x{size[0]}")
    return arr


def top_fraction_mask(saliency: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    """Boolean mask of the ``fraction`` highest-valued pixels (ties broken by position)."""
    flat = saliency.reshape(-1)
    k = max(1, int(round(fraction * flat.size)))
    order = np.argsort(-flat.astype(np.float64), kind="stable")[:k]
    mask = np.zeros(flat.size, dtype=bool)
    mask[order] = True
    return mask.reshape(saliency.shape)


__all__ = ["bilinear_upsample", "grad_cam", "load_image", "read_pgm", "saliency_map",
           "to_uint8", "top_fraction_mask", "write_pgm"]

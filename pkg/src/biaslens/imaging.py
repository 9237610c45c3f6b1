"""PNG encode/decode shared by the CLI and the HTTP service.

Both interfaces must emit byte-identical images for the same request, so
all quantization and PNG writing funnels through here: pixels are clamped
to [0, 1] and quantized with round(p * 255).
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from .data import IMG_SIZE
from .errors import BiasLensError


def pixels_to_png(pixels: np.ndarray) -> bytes:
    """Flat (768,) or (16, 16, 3) floats in [0, 1] to PNG bytes."""
    img = np.asarray(pixels, dtype=np.float64).reshape(IMG_SIZE, IMG_SIZE, 3)
    quant = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(quant, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_to_pixels(data: bytes) -> np.ndarray:
    """PNG bytes to a flat (768,) float array; larger inputs are resized."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise BiasLensError(f"could not decode image: {exc}") from exc
    img = img.convert("RGB")
    if img.size != (IMG_SIZE, IMG_SIZE):
        img = img.resize((IMG_SIZE, IMG_SIZE), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr.reshape(-1)

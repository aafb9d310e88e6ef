"""Binary PGM (P5, maxval 255) reading/writing, with PNG via Pillow."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .errors import DimensionError


def to_uint8(image) -> np.ndarray:
    arr = image.detach().cpu().numpy() if torch.is_tensor(image) else np.asarray(image)
    arr = arr.reshape(arr.shape[-2:]).astype(np.float64)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image) -> Path:
    path = Path(path)
    pix = to_uint8(image)
    h, w = pix.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes())
    return path


def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        out.append(data[start:pos])
    return out, pos + 1  # single whitespace byte precedes the raster


def read_pgm(path) -> torch.Tensor:
    """Return a [1, H, W] float32 tensor in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    raster = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8)
    if raster.size != w * h:
        raise DimensionError(f"{path}: truncated raster")
    return torch.from_numpy(raster.reshape(h, w).astype(np.float32) / maxval)[None]


def read_image(path) -> torch.Tensor:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)[None]


def write_png(path, image) -> Path:
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path)
    return Path(path)

"""PGM (P5) and raw float32 map I/O."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_pgm(path, img) -> None:
    """Write a map in [0, 1] (or a binary mask) as 8-bit P5."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D map, got shape {img.shape}")
    h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 file; returns uint8 values as an (H, W) array."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a P5 PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def write_mask_pgm(path, mask) -> None:
    write_pgm(path, (np.asarray(mask) > 0).astype(np.float64))


def read_mask_pgm(path) -> np.ndarray:
    img = read_pgm(path)
    if not np.all((img == 0) | (img == 255)):
        raise ValueError(f"{path}: binary mask must only hold 0 and 255")
    return (img == 255).astype(np.uint8)


def write_f32(path, img) -> None:
    """Raw little-endian float32, row-major, plus ``<path>.json`` with the size."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"f32 map needs 2-D input, got shape {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(img.astype("<f4").tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"width": w, "height": h}) + "\n")


def read_f32(path) -> np.ndarray:
    meta = json.loads(Path(str(path) + ".json").read_text())
    w, h = int(meta["width"]), int(meta["height"])
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} floats, found {data.size}")
    return data.reshape(h, w).astype(np.float32)

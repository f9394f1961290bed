"""Rectangular scalar fields over a complex-plane window, with PGM/CSV export.

Conventions fixed here and relied on everywhere else:
- window = (x0, x1, y0, y1); pixel (row r, col c) has center
  x0 + (x1-x0)*(c+0.5)/nx + i*(y0 + (y1-y0)*(r+0.5)/ny); row 0 is the lowest
  y. PGM files are written top row first, so the writer flips vertically and
  the CSV twin is written in the same (flipped) order as the image bytes.
- image quantization: round(value * maxval), clipped to [0, maxval]; masks
  use maxval 255 (bytes 0/255), probability fields use maxval 65535
  (big-endian 16-bit per the PGM spec).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

AGGREGATE = "aggregate"


@dataclass
class GridField:
    window: tuple[float, float, float, float]
    nx: int
    ny: int
    values: np.ndarray  # shape (ny, nx), float64
    vertex: int | str  # 1-based vertex id, AGGREGATE, or a label like "mask"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.ny, self.nx):
            raise ValueError(
                f"values shape {self.values.shape} != (ny={self.ny}, nx={self.nx})"
            )

    @property
    def pitch(self) -> tuple[float, float]:
        x0, x1, y0, y1 = self.window
        return ((x1 - x0) / self.nx, (y1 - y0) / self.ny)


def pixel_centers(
    window: tuple[float, float, float, float], nx: int, ny: int
) -> tuple[np.ndarray, np.ndarray]:
    x0, x1, y0, y1 = window
    xs = x0 + (x1 - x0) * (np.arange(nx) + 0.5) / nx
    ys = y0 + (y1 - y0) * (np.arange(ny) + 0.5) / ny
    return xs, ys


def complex_grid(window, nx: int, ny: int) -> np.ndarray:
    """(ny, nx) array of pixel-center points; row 0 at the window's low y."""
    xs, ys = pixel_centers(window, nx, ny)
    return xs[None, :] + 1j * ys[:, None]


def quantize(values: np.ndarray, maxval: int) -> np.ndarray:
    q = np.rint(np.clip(values, 0.0, 1.0) * maxval)
    return q.astype(np.uint16 if maxval > 255 else np.uint8)


def write_pgm(path, fld: GridField, maxval: int = 65535) -> None:
    q = quantize(fld.values, maxval)[::-1, :]  # top row first
    header = f"P5\n{fld.nx} {fld.ny}\n{maxval}\n".encode("ascii")
    body = q.astype(">u2").tobytes() if maxval > 255 else q.tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)


def read_pgm(path) -> tuple[int, np.ndarray]:
    """Returns (maxval, values array in GridField row order, scaled to [0,1])."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    nx, ny = (int(t) for t in parts[1].split())
    maxval = int(parts[2])
    dt = ">u2" if maxval > 255 else "u1"
    raw = np.frombuffer(parts[3], dtype=dt, count=nx * ny).reshape(ny, nx)
    return maxval, raw[::-1, :].astype(np.float64) / maxval


def write_csv(path, fld: GridField) -> None:
    # same row order as the PGM bytes so the image is exactly
    # round(csv * maxval) cell by cell
    rows = fld.values[::-1, :]
    with open(path, "w") as fh:
        for r in rows:
            fh.write(",".join(format(v, ".17g") for v in r))
            fh.write("\n")


def write_sidecar(path, fld: GridField, extra: dict | None = None) -> None:
    doc = {
        "window": list(fld.window),
        "nx": fld.nx,
        "ny": fld.ny,
        "vertex": fld.vertex,
    }
    doc.update(fld.meta)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def crop_center(fld: GridField, nx: int, ny: int, window) -> GridField:
    """Extract the centered nx x ny block whose pixel lattice matches
    `window` exactly. Pads must be integral pixel counts on each side."""
    offx = (fld.nx - nx) // 2
    offy = (fld.ny - ny) // 2
    if 2 * offx + nx != fld.nx or 2 * offy + ny != fld.ny:
        raise ValueError("crop is not centered on the pixel lattice")
    sub = fld.values[offy : offy + ny, offx : offx + nx]
    x0, x1, y0, y1 = fld.window
    hx, hy = fld.pitch
    got = (x0 + offx * hx, x0 + (offx + nx) * hx, y0 + offy * hy, y0 + (offy + ny) * hy)
    if any(abs(g - w) > 1e-9 * max(1.0, abs(w)) for g, w in zip(got, window)):
        raise ValueError(f"crop window mismatch: {got} vs {window}")
    return GridField(tuple(window), nx, ny, sub.copy(), fld.vertex, dict(fld.meta))

"""Sample files, loss traces, KDE grids and PPM heatmaps."""

from __future__ import annotations

import os
import struct

import numpy as np
from scipy.stats import gaussian_kde

SAMPLES_MAGIC = b"SBPT"


def _atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def samples_to_bytes(x) -> bytes:
    """16-byte header (magic, u32 n, u32 d, 4 pad bytes) then little-endian f64 rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    return SAMPLES_MAGIC + struct.pack("<II4x", n, d) + np.ascontiguousarray(x, dtype="<f8").tobytes()


def samples_from_bytes(data: bytes) -> np.ndarray:
    if data[:4] != SAMPLES_MAGIC:
        raise ValueError("not an SBPT sample file (bad magic)")
    n, d = struct.unpack_from("<II", data, 4)
    expected = 16 + 8 * n * d
    if len(data) != expected:
        raise ValueError(f"sample file has {len(data)} bytes, header implies {expected}")
    return np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64).reshape(n, d)


def samples_to_csv(x) -> str:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = x.shape[1]
    lines = [",".join(f"x{j}" for j in range(d))]
    lines.extend(",".join(repr(float(v)) for v in row) for row in x)
    return "\n".join(lines) + "\n"


def samples_from_csv(text: str) -> np.ndarray:
    """Parse a header row plus one row per point; errors name the offending line."""
    lines = text.splitlines()
    if not lines:
        raise ValueError("line 1: empty sample file")
    header = lines[0].split(",")
    d = len(header)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != d:
            raise ValueError(f"line {lineno}: expected {d} fields, found {len(fields)}")
        try:
            row = [float(f) for f in fields]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if not all(np.isfinite(row)):
            raise ValueError(f"line {lineno}: non-finite value")
        rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(len(rows), d)


def write_samples(stem, x) -> tuple[str, str]:
    """Write ``stem.csv`` and ``stem.bin``; returns both paths."""
    stem = os.fspath(stem)
    _atomic_write(stem + ".csv", samples_to_csv(x).encode())
    _atomic_write(stem + ".bin", samples_to_bytes(x))
    return stem + ".csv", stem + ".bin"


def read_samples(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == SAMPLES_MAGIC:
        return samples_from_bytes(data)
    return samples_from_csv(data.decode("utf-8"))


def write_trace(path, trace) -> None:
    lines = ["iteration,loss"] + [f"{int(it)},{float(loss)!r}" for it, loss in trace]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def write_trajectory(path, trajectory) -> None:
    """One row per (stage, step, particle)."""
    if not trajectory:
        _atomic_write(path, b"stage,step,particle\n")
        return
    d = trajectory[0][2].shape[1]
    lines = ["stage,step,particle," + ",".join(f"x{j}" for j in range(d))]
    for stage, step, pos in trajectory:
        for i, row in enumerate(pos):
            lines.append(f"{stage},{step},{i}," + ",".join(repr(float(v)) for v in row))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def kde_grid(samples, extent=(-8.0, 8.0, -8.0, 8.0), resolution: int = 200, bandwidth=None):
    """Gaussian KDE of 2-D samples on a regular grid (Scott's rule by default).

    Returns ``(xs, ys, density)`` with ``density[j, i]`` at ``(xs[i], ys[j])``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[1] != 2:
        raise ValueError("KDE grids are 2-D only")
    kde = gaussian_kde(samples.T, bw_method=bandwidth)
    xmin, xmax, ymin, ymax = extent
    xs = np.linspace(xmin, xmax, resolution)
    ys = np.linspace(ymin, ymax, resolution)
    gx, gy = np.meshgrid(xs, ys)
    dens = kde(np.vstack([gx.ravel(), gy.ravel()])).reshape(resolution, resolution)
    return xs, ys, dens


def kde_to_csv(xs, ys, dens) -> str:
    lines = ["x,y,density"]
    for j, y in enumerate(np.asarray(ys).tolist()):
        for x, v in zip(np.asarray(xs).tolist(), np.asarray(dens[j]).tolist()):
            lines.append(f"{x!r},{y!r},{v!r}")
    return "\n".join(lines) + "\n"


def heatmap_ppm(dens) -> bytes:
    """Binary P6 image, top row = largest y, black (0) to yellow (max) ramp."""
    dens = np.asarray(dens, dtype=np.float64)
    top = dens.max()
    u = dens / top if top > 0 else np.zeros_like(dens)
    u = u[::-1]
    rgb = np.stack([np.clip(3 * u, 0, 1), np.clip(3 * u - 1, 0, 1), np.clip(3 * u - 2, 0, 1)], axis=-1)
    pix = np.round(255 * rgb).astype(np.uint8)
    h, w = dens.shape
    return f"P6\n{w} {h}\n255\n".encode() + pix.tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)

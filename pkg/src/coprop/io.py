"""Readers and writers for the on-disk collection formats.

All grid formats are row-major with a one-line text header.  Label and mask
grids are whitespace-separated integers; RGB grids carry raw bytes after the
header line, three per pixel.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def _read_header(tokens: list[str], magic: str, path) -> tuple[int, int]:
    if len(tokens) < 3 or tokens[0] != magic:
        raise FormatError(f"{path}: expected header '{magic} width height'")
    try:
        width, height = int(tokens[1]), int(tokens[2])
    except ValueError as exc:
        raise FormatError(f"{path}: bad grid dimensions") from exc
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: grid dimensions must be positive")
    return width, height


def _read_int_grid(path, magic: str) -> np.ndarray:
    tokens = Path(path).read_text().split()
    width, height = _read_header(tokens, magic, path)
    body = tokens[3:]
    if len(body) != width * height:
        raise FormatError(
            f"{path}: expected {width * height} values, found {len(body)}")
    try:
        values = np.array([int(v) for v in body], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: non-integer grid entry") from exc
    return values.reshape(height, width)


def _write_int_grid(path, magic: str, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    height, width = grid.shape
    lines = [f"{magic} {width} {height}"]
    lines.extend(" ".join(str(int(v)) for v in row) for row in grid)
    Path(path).write_text("\n".join(lines) + "\n")


def read_label_grid(path) -> np.ndarray:
    return _read_int_grid(path, "P_LABELS")


def write_label_grid(path, labels: np.ndarray) -> None:
    _write_int_grid(path, "P_LABELS", labels)


def read_mask(path) -> np.ndarray:
    mask = _read_int_grid(path, "P_MASK")
    if not np.isin(mask, (0, 1)).all():
        raise FormatError(f"{path}: mask entries must be 0 or 1")
    return mask.astype(bool)


def write_mask(path, mask: np.ndarray) -> None:
    _write_int_grid(path, "P_MASK", np.asarray(mask, dtype=np.int64))


def read_rgb(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError(f"{path}: missing header line")
    width, height = _read_header(raw[:newline].decode("ascii").split(), "P_RGB", path)
    body = raw[newline + 1:]
    if len(body) != 3 * width * height:
        raise FormatError(
            f"{path}: expected {3 * width * height} bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()


def write_rgb(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    height, width, _ = rgb.shape
    Path(path).write_bytes(f"P_RGB {width} {height}\n".encode("ascii") + rgb.tobytes())


def read_merge_table(path) -> dict[tuple[int, int], float]:
    """Rows ``part_a part_b lambda_merge``; returns a symmetric map."""
    table: dict[tuple[int, int], float] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if len(fields) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'part_a part_b lambda_merge'")
        a, b, level = int(fields[0]), int(fields[1]), float(fields[2])
        for key in ((a, b), (b, a)):
            if key in table and table[key] != level:
                raise FormatError(f"{path}:{lineno}: conflicting merge level for {a},{b}")
            table[key] = level
    return table


def write_merge_table(path, table: dict[tuple[int, int], float]) -> None:
    rows = sorted((a, b, lvl) for (a, b), lvl in table.items() if a < b)
    Path(path).write_text("".join(f"{int(a)} {int(b)} {float(lvl)!r}\n" for a, b, lvl in rows))


def read_histogram_table(path) -> dict[int, np.ndarray]:
    hists: dict[int, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 4097:
            raise FormatError(f"{path}:{lineno}: expected part id followed by 4096 values")
        hists[int(fields[0])] = np.array([float(v) for v in fields[1:]])
    return hists


def write_histogram_table(path, hists: dict[int, np.ndarray]) -> None:
    with open(path, "w") as fh:
        for pid in sorted(hists):
            fh.write(str(pid) + " " + " ".join(repr(float(v)) for v in hists[pid]) + "\n")


def read_correspondences(path) -> tuple[str, str, np.ndarray]:
    """Returns ``(src_image, dst_image, rows)`` with rows ``sx sy dx dy confidence``."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].split() or lines[0].split()[0] != "CORR":
        raise FormatError(f"{path}: expected header 'CORR src_image dst_image'")
    header = lines[0].split()
    if len(header) != 3:
        raise FormatError(f"{path}: expected header 'CORR src_image dst_image'")
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise FormatError(f"{path}:{lineno}: expected 'sx sy dx dy confidence'")
        rows.append([float(v) for v in fields])
    data = np.array(rows, dtype=float).reshape(-1, 5)
    return header[1], header[2], data


def write_correspondences(path, src: str, dst: str, rows: np.ndarray) -> None:
    rows = np.asarray(rows, dtype=float).reshape(-1, 5)
    out = [f"CORR {src} {dst}"]
    out.extend(f"{int(r[0])} {int(r[1])} {int(r[2])} {int(r[3])} {float(r[4])!r}" for r in rows)
    Path(path).write_text("\n".join(out) + "\n")

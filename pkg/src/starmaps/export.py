"""Raster export formats: CSV, GeoJSON cells and binary PPM heatmaps."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .geometry import BBox, GeoOrigin
from .ingest import unproject

CSV_HEADER = ["row", "col", "x", "y", "value"]


class RasterFileError(ValueError):
    pass


def write_raster_csv(path: str | Path, values: np.ndarray, extent: BBox) -> None:
    """One line per node, row-major; row 0 is the southern edge."""
    rows, cols = values.shape
    xs = np.linspace(extent.xmin, extent.xmax, cols)
    ys = np.linspace(extent.ymin, extent.ymax, rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(CSV_HEADER)
    for i in range(rows):
        for j in range(cols):
            w.writerow([i, j, repr(float(xs[j])), repr(float(ys[i])), repr(float(values[i, j]))])
    Path(path).write_text(buf.getvalue(), newline="")


def read_raster_csv(path: str | Path) -> tuple[np.ndarray, BBox]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != CSV_HEADER:
                raise RasterFileError(f"{path}: expected header {','.join(CSV_HEADER)}")
            recs = [(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in reader if r]
    except (OSError, ValueError, IndexError) as exc:
        if isinstance(exc, RasterFileError):
            raise
        raise RasterFileError(f"{path}: malformed raster file ({exc})") from None
    if not recs:
        raise RasterFileError(f"{path}: empty raster")
    rows = max(r[0] for r in recs) + 1
    cols = max(r[1] for r in recs) + 1
    if len(recs) != rows * cols:
        raise RasterFileError(f"{path}: {len(recs)} cells do not fill a {rows}x{cols} grid")
    values = np.full((rows, cols), np.nan)
    xs, ys = [], []
    for i, j, x, y, v in recs:
        values[i, j] = v
        xs.append(x)
        ys.append(y)
    if np.isnan(values).any():
        raise RasterFileError(f"{path}: missing or non-numeric cells")
    return values, BBox(min(xs), min(ys), max(xs), max(ys)) if rows > 1 and cols > 1 else BBox(min(xs), min(ys), min(xs) + 1, min(ys) + 1)


def raster_geojson(layers: dict[str, np.ndarray], extent: BBox, origin: GeoOrigin, metadata: dict | None = None) -> dict:
    """FeatureCollection with one WGS84 polygon per node; layer values as properties."""
    first = next(iter(layers.values()))
    rows, cols = first.shape
    xs = np.linspace(extent.xmin, extent.xmax, cols)
    ys = np.linspace(extent.ymin, extent.ymax, rows)
    hx = (extent.xmax - extent.xmin) / (cols - 1) / 2
    hy = (extent.ymax - extent.ymin) / (rows - 1) / 2
    features = []
    for i in range(rows):
        for j in range(cols):
            x, y = xs[j], ys[i]
            ring = [(x - hx, y - hy), (x + hx, y - hy), (x + hx, y + hy), (x - hx, y + hy), (x - hx, y - hy)]
            coords = [[round(lon, 9), round(lat, 9)] for lat, lon in (unproject(origin, px, py) for px, py in ring)]
            props = {"row": i, "col": j, "x": float(x), "y": float(y)}
            props.update({name: float(v[i, j]) for name, v in layers.items()})
            features.append({"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [coords]}, "properties": props})
    doc = {"type": "FeatureCollection", "features": features}
    if metadata is not None:
        doc["metadata"] = metadata
    return doc


def write_geojson(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


# Low-to-high color ramp (dark blue, teal, yellow, red).
_RAMP = np.array([[20, 30, 110], [30, 150, 150], [240, 220, 60], [200, 30, 30]], dtype=float)


def colorize(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(values.min()), float(values.max())
    t = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    pos = t * (len(_RAMP) - 1)
    k = np.minimum(np.floor(pos).astype(int), len(_RAMP) - 2)
    frac = (pos - k)[..., None]
    rgb = _RAMP[k] * (1 - frac) + _RAMP[k + 1] * frac
    return np.rint(rgb).astype(np.uint8), lo, hi


def write_ppm(path: str | Path, values: np.ndarray) -> tuple[float, float]:
    """Binary PPM, one pixel per node, north up. Returns the legend range."""
    rgb, lo, hi = colorize(values[::-1])
    rows, cols = values.shape
    Path(path).write_bytes(f"P6\n{cols} {rows}\n255\n".encode() + rgb.tobytes())
    return lo, hi

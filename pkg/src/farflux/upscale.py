"""Regional application of the trained flux arm.

A region raster is a directory holding band tiles for a sequence of
timestamps plus gridded driver fields on a (possibly coarser) grid;
the flux arm alone is evaluated per pixel - no footprint is involved,
which is the point of the factorized model. Processing is streamed
tile-by-tile (row blocks), so memory stays bounded by the tile size,
and tiling does not change results.

Geometry: map x = origin_x + col * pixel, map y = origin_y - row *
pixel (row 0 is the north edge). Driver lookup is nearest-cell in
space with exact timestamp match; pixels outside the driver grid's
coverage are masked rather than extrapolated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import model as far_model, numerics
from .dataset import QUALITY_VALID, rle_decode, rle_encode
from .errors import DataError

FORMAT_VERSION = 1
DRIVER_FIELDS = ("SW_IN", "TA", "RH")


@dataclass
class DriverGrid:
    origin_x: float
    origin_y: float
    cell_size_m: float
    timestamps: np.ndarray     # [Td] datetime64[s]
    values: np.ndarray         # [Td, nH, nW, 3] float32

    def time_index(self, ts):
        i = np.searchsorted(self.timestamps, ts)
        if i >= len(self.timestamps) or self.timestamps[i] != ts:
            raise DataError(f"no driver field at {ts} (exact match required)")
        return int(i)


@dataclass
class RegionRaster:
    grid_dims: tuple           # (H, W)
    pixel_size_m: float
    origin_x: float
    origin_y: float
    band_names: tuple
    timestamps: np.ndarray     # [T] datetime64[s]
    bands: np.ndarray          # [T, H, W, D] float32
    quality: np.ndarray        # [T, H, W] uint8
    angles: np.ndarray         # [T, 4]
    drivers: DriverGrid


def save_region(region, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w = region.grid_dims
    d = region.drivers
    manifest = {
        "format_version": FORMAT_VERSION,
        "grid": {"H": h, "W": w, "pixel_size_m": region.pixel_size_m,
                 "origin_x": region.origin_x, "origin_y": region.origin_y},
        "bands": list(region.band_names),
        "timestamps": [str(t) for t in region.timestamps.astype("datetime64[s]")],
        "angles": [[float(a) for a in row] for row in region.angles],
        "quality_rle": [rle_encode(q.ravel()) for q in region.quality],
        "drivers": {
            "fields": list(DRIVER_FIELDS),
            "grid": {"nH": d.values.shape[1], "nW": d.values.shape[2],
                     "cell_size_m": d.cell_size_m,
                     "origin_x": d.origin_x, "origin_y": d.origin_y},
            "timestamps": [str(t) for t in d.timestamps.astype("datetime64[s]")],
        },
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                   sort_keys=True))
    (path / "bands.bin").write_bytes(
        np.ascontiguousarray(region.bands, dtype="<f4").tobytes())
    (path / "drivers.bin").write_bytes(
        np.ascontiguousarray(d.values, dtype="<f4").tobytes())


def load_region(path):
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise DataError(f"no region manifest at {mf}")
    manifest = json.loads(mf.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError("unsupported region format_version")
    g = manifest["grid"]
    h, w = g["H"], g["W"]
    bands = tuple(manifest["bands"])
    ts = np.array(manifest["timestamps"], dtype="datetime64[s]")
    raw = np.frombuffer((path / "bands.bin").read_bytes(), dtype="<f4")
    expected = len(ts) * h * w * len(bands)
    if raw.size != expected:
        raise DataError(f"bands.bin holds {raw.size} values, expected {expected}")
    frames = raw.reshape(len(ts), h, w, len(bands))
    quality = np.stack([rle_decode(r, h * w).reshape(h, w)
                        for r in manifest["quality_rle"]])
    angles = np.asarray(manifest["angles"], dtype=np.float64)
    dm = manifest["drivers"]
    dg = dm["grid"]
    dts = np.array(dm["timestamps"], dtype="datetime64[s]")
    draw = np.frombuffer((path / "drivers.bin").read_bytes(), dtype="<f4")
    dexp = len(dts) * dg["nH"] * dg["nW"] * len(DRIVER_FIELDS)
    if draw.size != dexp:
        raise DataError(f"drivers.bin holds {draw.size} values, expected {dexp}")
    drv = DriverGrid(dg["origin_x"], dg["origin_y"], dg["cell_size_m"], dts,
                     draw.reshape(len(dts), dg["nH"], dg["nW"],
                                  len(DRIVER_FIELDS)))
    return RegionRaster((h, w), g["pixel_size_m"], g["origin_x"],
                        g["origin_y"], bands, ts, frames, quality, angles, drv)


def _driver_lookup(region):
    """Nearest driver cell per raster pixel plus the coverage mask."""
    h, w = region.grid_dims
    d = region.drivers
    px = region.origin_x + (np.arange(w) + 0.5) * region.pixel_size_m
    py = region.origin_y - (np.arange(h) + 0.5) * region.pixel_size_m
    cx = (px - d.origin_x) / d.cell_size_m - 0.5
    cy = (d.origin_y - py) / d.cell_size_m - 0.5
    ix = np.rint(cx).astype(np.int64)
    iy = np.rint(cy).astype(np.int64)
    n_h, n_w = d.values.shape[1], d.values.shape[2]
    cover_x = (ix >= 0) & (ix < n_w)
    cover_y = (iy >= 0) & (iy < n_h)
    covered = cover_y[:, None] & cover_x[None, :]
    return (np.clip(iy, 0, n_h - 1), np.clip(ix, 0, n_w - 1), covered)


def upscale_region(model, region, time_indices=None, tile_rows=64):
    """Yield (t_index, flux [H,W] float64, valid mask) per timestep.

    Only the flux arm runs: each pixel gets its own bands and its
    nearest driver cell's values. Pixels with invalid band data or no
    driver coverage are masked (and zero-filled in the flux array).
    """
    if tuple(region.band_names) != tuple(model.band_names):
        raise DataError("region bands do not match the model's band schema")
    h, w = region.grid_dims
    d_bands = len(model.band_names)
    iy, ix, covered = _driver_lookup(region)
    if not covered.any():
        raise DataError("driver fields do not cover the region at all")
    if time_indices is None:
        time_indices = range(len(region.timestamps))
    for t in time_indices:
        ts = region.timestamps[t]
        ti = region.drivers.time_index(ts)
        drv = np.asarray(region.drivers.values[ti], dtype=np.float64)
        drv_n = model.norm.apply("drivers", drv)
        ang_n = model.norm.apply("angles",
                                 np.asarray(region.angles[t], dtype=np.float64))
        flux = np.zeros((h, w))
        valid = (region.quality[t] == QUALITY_VALID) & covered
        for r0 in range(0, h, tile_rows):
            r1 = min(r0 + tile_rows, h)
            rows = r1 - r0
            bn = model.norm.apply(
                "bands",
                np.asarray(region.bands[t, r0:r1], dtype=np.float64)
                .reshape(rows * w, d_bands))
            x = np.empty((rows * w, d_bands + 7))
            x[:, :d_bands] = bn
            x[:, d_bands:d_bands + 4] = ang_n
            x[:, d_bands + 4:] = drv_n[iy[r0:r1][:, None], ix[None, :]] \
                .reshape(rows * w, 3)
            out = numerics.mlp_forward_batch(model.flux_mlp, x)[:, 0]
            flux[r0:r1] = model.norm.invert("target", out[:, None])[:, 0] \
                .reshape(rows, w)
        flux[~valid] = 0.0
        yield t, flux, valid


def temporal_mean_map(fluxes, masks):
    """Per-pixel mean over timesteps, counting only valid entries."""
    fluxes = np.asarray(fluxes, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if fluxes.ndim != 3 or fluxes.shape[0] == 0:
        raise DataError("temporal mean needs a nonempty [T, H, W] stack")
    count = masks.sum(axis=0)
    total = (fluxes * masks).sum(axis=0)
    with np.errstate(invalid="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return mean, count


def spatial_mean_series(fluxes, masks, timestamps):
    """Per-timestep mean over valid pixels; all-masked steps become gaps."""
    fluxes = np.asarray(fluxes, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    n_valid = masks.reshape(masks.shape[0], -1).sum(axis=1)
    total = (fluxes * masks).reshape(fluxes.shape[0], -1).sum(axis=1)
    with np.errstate(invalid="ignore"):
        mean = np.where(n_valid > 0, total / np.maximum(n_valid, 1), np.nan)
    return pd.DataFrame({"timestamp": pd.to_datetime(timestamps),
                         "mean_flux": mean, "n_valid": n_valid})


def write_rasters(path, timestamps, fluxes, masks):
    """flux.bin/[T][H][W] float32 + mask.bin/[T][H][W] uint8 + index."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    fluxes = np.asarray(fluxes)
    (path / "flux.bin").write_bytes(
        np.ascontiguousarray(fluxes, dtype="<f4").tobytes())
    (path / "mask.bin").write_bytes(
        np.ascontiguousarray(masks, dtype=np.uint8).tobytes())
    index = {"timestamps": [str(t) for t in
                            np.asarray(timestamps).astype("datetime64[s]")],
             "shape": list(fluxes.shape),
             "layout": "[T][H][W] row-major", "dtype": "<f4",
             "units": "umol CO2 m-2 s-1"}
    (path / "index.json").write_text(json.dumps(index, sort_keys=True))

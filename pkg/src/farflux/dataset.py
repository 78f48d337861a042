"""Dataset model and on-disk interchange format.

A dataset is a directory: ``manifest.json`` (schema version, grid size,
band names, site table) plus one subdirectory per site holding
``samples.csv`` (ISO-8601 timestamps and named half-hourly columns),
``patches.bin`` (little-endian float32 frames, row-major [L][W][D]) and
``patches.json`` (frame timestamps plus run-length-encoded per-pixel
quality masks). Everything round-trips bit-exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError

FORMAT_VERSION = 1

QUALITY_VALID = 0
QUALITY_CLOUD = 1
QUALITY_MISSING = 2

SAMPLE_COLUMNS = ("timestamp", "SW_IN", "TA", "RH", "WD", "WS",
                  "USTAR", "H", "FC", "patch_ref")


@dataclass
class SitePatches:
    timestamps: np.ndarray        # [T] datetime64[s], sorted
    bands: np.ndarray             # [T, L, W, D] float32
    quality: np.ndarray           # [T, L, W] uint8
    angles: np.ndarray            # [T, 4] degrees: SAA, SZA, VAA, VZA
    never_observed: np.ndarray = None  # [T, L, W] bool, set by gap fill

    @property
    def n(self):
        return len(self.timestamps)


@dataclass
class SiteData:
    site_id: str
    ecosystem: str
    tower_height_m: float
    samples: pd.DataFrame         # SAMPLE_COLUMNS, sorted by timestamp
    patches: SitePatches

    @property
    def n_samples(self):
        return len(self.samples)


@dataclass
class Dataset:
    grid_dims: tuple              # (L, W)
    pixel_size_m: float
    band_names: tuple
    sites: list

    @property
    def tower_rc(self):
        return (self.grid_dims[0] // 2, self.grid_dims[1] // 2)

    def site(self, site_id):
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise DataError(f"site {site_id!r} not in dataset")


def rle_encode(flat):
    """[value, count, value, count, ...] over a flat uint8 array."""
    flat = np.asarray(flat)
    if flat.size == 0:
        return []
    edges = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [flat.size]])
    out = []
    for s, e in zip(starts, ends):
        out.append(int(flat[s]))
        out.append(int(e - s))
    return out


def rle_decode(runs, size):
    out = np.empty(size, dtype=np.uint8)
    pos = 0
    for v, c in zip(runs[::2], runs[1::2]):
        out[pos:pos + c] = v
        pos += c
    if pos != size:
        raise DataError(f"quality RLE decodes to {pos} pixels, expected {size}")
    return out


def validate_samples(df, site_id):
    """Hard range checks on present (non-NaN) values; NaNs are left for
    the cleaning stage."""
    def bad(mask, what):
        if bool(mask.fillna(False).any()):
            raise DataError(f"site {site_id}: {what}")

    bad((df["WD"] < 0) | (df["WD"] >= 360), "WD outside [0, 360)")
    bad(df["WS"] < 0, "negative wind speed")
    bad((df["RH"] < 0) | (df["RH"] > 100), "RH outside [0, 100]")
    ts = df["timestamp"].to_numpy()
    if len(ts) > 1 and (np.diff(ts) <= np.timedelta64(0, "s")).any():
        raise DataError(f"site {site_id}: timestamps not strictly increasing")


def save_dataset(ds, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "grid": {"L": ds.grid_dims[0], "W": ds.grid_dims[1],
                 "pixel_size_m": ds.pixel_size_m},
        "bands": list(ds.band_names),
        "sites": [{"site_id": s.site_id, "ecosystem": s.ecosystem,
                    "tower_height_m": s.tower_height_m,
                    "n_samples": int(s.n_samples),
                    "n_patches": int(s.patches.n)}
                   for s in ds.sites],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                   sort_keys=True))
    for s in ds.sites:
        sdir = path / s.site_id
        sdir.mkdir(exist_ok=True)
        df = s.samples.copy()
        df["timestamp"] = df["timestamp"].dt.strftime("%Y-%m-%dT%H:%M:%S")
        df.to_csv(sdir / "samples.csv", index=False)
        p = s.patches
        (sdir / "patches.bin").write_bytes(
            np.ascontiguousarray(p.bands, dtype="<f4").tobytes(order="C"))
        index = {
            "timestamps": [str(t) for t in p.timestamps.astype("datetime64[s]")],
            "dtype": "<f4",
            "layout": "[T][L][W][D] row-major",
            "angles": [[float(a) for a in row] for row in p.angles],
            "quality_rle": [rle_encode(q.ravel()) for q in p.quality],
        }
        (sdir / "patches.json").write_text(json.dumps(index, sort_keys=True))


def load_dataset(path):
    path = Path(path)
    mf_path = path / "manifest.json"
    if not mf_path.exists():
        raise DataError(f"no dataset manifest at {mf_path}")
    manifest = json.loads(mf_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format_version "
                        f"{manifest.get('format_version')!r}")
    grid = manifest["grid"]
    el, w = grid["L"], grid["W"]
    bands = tuple(manifest["bands"])
    sites = []
    for entry in manifest["sites"]:
        sid = entry["site_id"]
        sdir = path / sid
        df = pd.read_csv(sdir / "samples.csv")
        missing = set(SAMPLE_COLUMNS) - set(df.columns)
        if missing:
            raise DataError(f"site {sid}: samples.csv missing columns {sorted(missing)}")
        df["timestamp"] = pd.to_datetime(df["timestamp"])
        df["patch_ref"] = df["patch_ref"].astype(np.int64)
        index = json.loads((sdir / "patches.json").read_text())
        ts = np.array(index["timestamps"], dtype="datetime64[s]")
        raw = np.frombuffer((sdir / "patches.bin").read_bytes(), dtype="<f4")
        n_t = len(ts)
        expected = n_t * el * w * len(bands)
        if raw.size != expected:
            raise DataError(f"site {sid}: patches.bin holds {raw.size} values, "
                            f"expected {expected}")
        frames = raw.reshape(n_t, el, w, len(bands)).copy()
        quality = np.stack([rle_decode(r, el * w).reshape(el, w)
                            for r in index["quality_rle"]]) if n_t else \
            np.zeros((0, el, w), dtype=np.uint8)
        angles = np.asarray(index["angles"], dtype=np.float64).reshape(n_t, 4)
        validate_samples(df, sid)
        refs = df["patch_ref"].to_numpy()
        if len(refs) and (refs.min() < 0 or refs.max() >= n_t):
            raise DataError(f"site {sid}: patch_ref out of range")
        sites.append(SiteData(sid, entry["ecosystem"],
                              float(entry["tower_height_m"]), df,
                              SitePatches(ts, frames, quality, angles)))
    return Dataset((el, w), float(grid["pixel_size_m"]), bands, sites)


# ---------------------------------------------------------------------------
# z-score normalization
# ---------------------------------------------------------------------------

def normalize_fit(x):
    """Column means and stds over x:[n, f]; constant columns get std 1
    (with a warning) so they map to zero."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flat = std == 0.0
    if flat.any():
        warnings.warn(f"{int(flat.sum())} constant feature(s); std clamped to 1",
                      stacklevel=2)
        std = np.where(flat, 1.0, std)
    return mean, std


def normalize_apply(stats, x):
    mean, std = stats
    return (np.asarray(x, dtype=np.float64) - mean) / std


def denormalize(stats, x):
    mean, std = stats
    return np.asarray(x, dtype=np.float64) * std + mean

"""Feature assembly: datasets -> normalized model input tensors.

Bundles hold per-site normalized arrays ready for batching. Statistics
are fit strictly on training-labeled samples of training-role sites and
then travel with the model checkpoint, so evaluation and upscaling apply
the exact normalization the model was trained with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, model as far_model, prep
from .dataset import normalize_fit
from .errors import DataError


@dataclass
class SiteBundle:
    site_id: str
    ecosystem: str
    timestamps: np.ndarray      # [N] datetime64[s]
    bands_n: np.ndarray         # [T, P, D] normalized, gap-filled
    angles_n: np.ndarray        # [T, 4] normalized
    drivers_n: np.ndarray       # [N, 3] normalized
    fp_feat_n: np.ndarray       # [N, 7] normalized encoded predictors
    wd_raw: np.ndarray          # [N] degrees, for augmentation
    fp_raw: np.ndarray          # [N, 6] raw footprint vectors
    y: np.ndarray               # [N] physical target
    y_n: np.ndarray             # [N] normalized target
    patch_ref: np.ndarray       # [N] int
    trainable: np.ndarray       # [N] bool: patch has no never-observed pixels
    labels: np.ndarray = None   # [N] int8 sample split labels (train sites)
    baseline_win_n: np.ndarray = None  # [T, D] normalized 5x5 window means

    @property
    def n(self):
        return len(self.y)


def fp_raw_matrix(df, height):
    return np.column_stack([
        df["WD"].to_numpy(dtype=np.float64),
        df["WS"].to_numpy(dtype=np.float64),
        df["USTAR"].to_numpy(dtype=np.float64),
        df["TA"].to_numpy(dtype=np.float64),
        df["H"].to_numpy(dtype=np.float64),
        np.full(len(df), height, dtype=np.float64),
    ])


def driver_matrix(df):
    return df[["SW_IN", "TA", "RH"]].to_numpy(dtype=np.float64)


def fit_norm_stats(dataset, splits):
    """Z-score stats from training-labeled samples of training sites;
    band/angle stats come from those sites' (gap-filled) patches."""
    drv, fpv, tgt, band_rows, angle_rows = [], [], [], [], []
    for s in dataset.sites:
        if splits.site_roles[s.site_id] != "train":
            continue
        mask = splits.sample_labels[s.site_id] == prep.TRAIN
        if not mask.any():
            continue
        df = s.samples.loc[mask]
        drv.append(driver_matrix(df))
        fpv.append(far_model.encode_fp_vars(fp_raw_matrix(df, s.tower_height_m)))
        tgt.append(df["FC"].to_numpy(dtype=np.float64))
        p = s.patches
        band_rows.append(np.asarray(p.bands, dtype=np.float64)
                         .reshape(-1, p.bands.shape[3]))
        angle_rows.append(np.asarray(p.angles, dtype=np.float64))
    if not drv:
        raise DataError("no training samples to fit normalization on")
    groups = {
        "bands": normalize_fit(np.concatenate(band_rows)),
        "angles": normalize_fit(np.concatenate(angle_rows)),
        "drivers": normalize_fit(np.concatenate(drv)),
        "fp": normalize_fit(np.concatenate(fpv)),
        "target": normalize_fit(np.concatenate(tgt)[:, None]),
    }
    return far_model.NormStats(groups)


def build_bundles(dataset, norm, splits=None):
    """Gap-fill patches and normalize everything once per site."""
    bundles = {}
    el, w = dataset.grid_dims
    win = _center_window(dataset.grid_dims, dataset.tower_rc)
    for s in dataset.sites:
        prep.gap_fill_patches(s.patches)
        p = s.patches
        bands = norm.apply("bands",
                           np.asarray(p.bands, dtype=np.float64)
                           .reshape(p.n, el * w, -1))
        angles = norm.apply("angles", np.asarray(p.angles, dtype=np.float64))
        df = s.samples
        fp_raw = fp_raw_matrix(df, s.tower_height_m)
        drivers = norm.apply("drivers", driver_matrix(df))
        fp_feat = norm.apply("fp", far_model.encode_fp_vars(fp_raw))
        y = df["FC"].to_numpy(dtype=np.float64)
        y_n = norm.apply("target", y[:, None])[:, 0]
        refs = df["patch_ref"].to_numpy()
        frame_ok = ~p.never_observed.reshape(p.n, -1).any(axis=1)
        labels = None
        if splits is not None and s.site_id in splits.sample_labels:
            labels = splits.sample_labels[s.site_id]
        bwin = bands.reshape(p.n, el, w, -1)[:, win[0], win[1], :].mean(axis=1)
        bundles[s.site_id] = SiteBundle(
            s.site_id, s.ecosystem, df["timestamp"].to_numpy(),
            np.ascontiguousarray(bands), angles, drivers, fp_feat,
            df["WD"].to_numpy(dtype=np.float64), fp_raw, y, y_n, refs,
            frame_ok[refs], labels, bwin)
    return bundles


def _center_window(grid_dims, tower_rc, size=5):
    el, w = grid_dims
    if el < size or w < size:
        raise DataError(f"grid {grid_dims} smaller than the {size}x{size} "
                        f"baseline window")
    half = size // 2
    rows = np.arange(tower_rc[0] - half, tower_rc[0] + half + 1)
    cols = np.arange(tower_rc[1] - half, tower_rc[1] + half + 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return rr.ravel(), cc.ravel()


def center_window_mean(bands, tower_rc, size=5):
    """Raw per-band mean over the size x size window centered on the
    tower pixel."""
    bands = np.asarray(bands, dtype=np.float64)
    rr, cc = _center_window(bands.shape[:2], tower_rc, size)
    return bands[rr, cc, :].mean(axis=0)


class AssemblyBuffers:
    """Reusable batch buffers for feature assembly (keeps the hot loop
    free of multi-megabyte allocations)."""

    def __init__(self, max_b, grid_dims, d_bands):
        el, w = grid_dims
        p = el * w
        self.max_b = max_b
        self.xf = np.empty((max_b, p, d_bands + 7))
        self.xp = np.empty((max_b, p, len(far_model.FP_FEATURE_NAMES) + 2))
        self.y = np.empty(max_b)
        self.gather = np.empty((max_b, el, w, d_bands))
        self.rotated = np.empty((max_b, el, w, d_bands))


def fill_far_batch(bufs, pos, bundle, idx, grid_dims, norm, angles_deg=None,
                   exact_right_angles=False):
    """Write features for `idx` into bufs at row offset `pos`; returns
    the new offset. angles_deg applies rotation augmentation: patch
    planes rotate and the wind direction shifts to match."""
    el, w = grid_dims
    p = el * w
    b = len(idx)
    refs = bundle.patch_ref[idx]
    d = bundle.bands_n.shape[2]
    wd = bundle.wd_raw[idx]
    xf = bufs.xf[pos:pos + b]
    xp = bufs.xp[pos:pos + b]

    if angles_deg is None:
        for j in range(b):
            xf[j, :, :d] = bundle.bands_n[refs[j]]
    else:
        angles_deg = np.asarray(angles_deg, dtype=np.float64)
        src = bufs.gather[:b]
        for j in range(b):
            src[j] = bundle.bands_n[refs[j]].reshape(el, w, d)
        if exact_right_angles:
            dst = bufs.rotated[:b]
            for j in range(b):
                dst[j], _ = prep.rotate_augment(src[j], 0.0,
                                                float(angles_deg[j]))
        else:
            dst = kernels.rotate_batch(src, np.ascontiguousarray(angles_deg),
                                       out=bufs.rotated[:b])
        xf[:, :, :d] = dst.reshape(b, p, d)
        wd = (wd - angles_deg) % 360.0

    xf[:, :, d:d + 4] = bundle.angles_n[refs][:, None, :]
    xf[:, :, d + 4:] = bundle.drivers_n[idx][:, None, :]

    if angles_deg is None:
        feats = bundle.fp_feat_n[idx]
    else:
        raw = bundle.fp_raw[idx].copy()
        raw[:, 0] = wd
        feats = norm.apply("fp", far_model.encode_fp_vars(raw))
    coords = far_model.cell_coordinates(el, w)
    xp[:, :, :feats.shape[1]] = feats[:, None, :]
    xp[:, :, feats.shape[1]:] = coords[None, :, :]
    bufs.y[pos:pos + b] = bundle.y_n[idx]
    return pos + b


def assemble_far(bundle, idx, grid_dims, norm, angles_deg=None,
                 exact_right_angles=False, bufs=None):
    """Build (xf [B,P,Df], xp [B,P,Dp], y_n [B]) for the given samples.
    Pass `bufs` to reuse buffers across calls (views are returned)."""
    b = len(idx)
    if bufs is None:
        bufs = AssemblyBuffers(b, grid_dims, bundle.bands_n.shape[2])
    fill_far_batch(bufs, 0, bundle, idx, grid_dims, norm, angles_deg,
                   exact_right_angles)
    return bufs.xf[:b], bufs.xp[:b], bufs.y[:b]


def assemble_baseline(bundle, idx):
    """[B, D+7] baseline features: normalized window means + angles +
    drivers, plus the normalized targets."""
    refs = bundle.patch_ref[idx]
    x = np.concatenate([bundle.baseline_win_n[refs],
                        bundle.angles_n[refs],
                        bundle.drivers_n[idx]], axis=1)
    return np.ascontiguousarray(x), bundle.y_n[idx]

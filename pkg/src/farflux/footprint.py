"""Footprint diagnostics and the analytic plume reference.

The plume is a deliberately simple stand-in for full footprint
parameterizations: a 2D Gaussian displaced upwind of the tower by
``a * HEIGHT / max(USTAR, u_min)`` with along/cross-wind spreads
proportional to that peak distance. It serves as synthetic ground truth
and as a qualitative reference for learned footprints, nothing more.

Conventions: grid rows run north to south, columns west to east; wind
direction is meteorological (degrees clockwise from north, direction the
wind comes FROM), so the upwind unit vector in (row, col) space is
(-cos WD, +sin WD). Cell-center coordinates are x_w=(w+0.5)/W,
y_l=(l+0.5)/L, matching the model's footprint arm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import kernels, model as far_model
from .errors import DataError, DegenerateFootprintError

# slack for the strict "cumulative sum exceeds threshold" comparison, so
# float accumulation cannot flip a mathematically-exact boundary case
_AREA_EPS = 1e-9


@dataclass
class PlumeParams:
    """peak distance = peak_scale * HEIGHT / max(USTAR, u_min); spreads
    are fractions of the peak distance."""

    peak_scale: float = 10.0
    along_spread: float = 0.5
    cross_spread: float = 0.3
    u_min: float = 0.1

    def __post_init__(self):
        if min(self.peak_scale, self.along_spread, self.cross_spread,
               self.u_min) <= 0:
            raise DataError("plume parameters must be positive")

    def peak_distance(self, height, ustar):
        return self.peak_scale * height / max(ustar, self.u_min)

    def to_dict(self):
        return {"peak_scale": self.peak_scale,
                "along_spread": self.along_spread,
                "cross_spread": self.cross_spread, "u_min": self.u_min}


def analytic_plume(fp_vars, params, grid_dims, pixel_size_m, tower_rc=None):
    """Gaussian plume footprint discretized at cell centers, renormalized
    to sum to 1. Uses WD, USTAR and HEIGHT from the footprint vector."""
    v = np.asarray(fp_vars, dtype=np.float64)
    if v.shape != (6,) or not np.isfinite(v).all():
        raise DataError("footprint vector must be 6 finite values")
    wd, ustar, height = v[0], v[2], v[5]
    el, w = grid_dims
    if tower_rc is None:
        tower_rc = (el // 2, w // 2)
    peak = params.peak_distance(height, ustar)
    g = kernels.plume_grid(el, w, pixel_size_m, tower_rc[0], tower_rc[1],
                           wd, peak, params.along_spread * peak,
                           params.cross_spread * peak)
    total = g.sum()
    if total <= 0.0:
        raise DegenerateFootprintError(
            f"plume mass entirely off-grid (peak {peak:.0f} m)")
    return g / total


@dataclass
class PlumePredictor:
    """Adapter giving the analytic plume the same predict surface as a
    trained model, for scans and centroid tables."""

    params: PlumeParams
    grid_dims: tuple
    pixel_size_m: float
    tower_rc: tuple = None

    def predict_footprint(self, fp_vars):
        return analytic_plume(fp_vars, self.params, self.grid_dims,
                              self.pixel_size_m, self.tower_rc)


@dataclass
class FarFootprintPredictor:
    """Same surface over a trained model's footprint arm."""

    model: object

    @property
    def grid_dims(self):
        return self.model.grid_dims

    @property
    def pixel_size_m(self):
        return self.model.pixel_size_m

    @property
    def tower_rc(self):
        return self.model.tower_rc

    def predict_footprint(self, fp_vars):
        return far_model.predict_footprint(self.model, fp_vars)


def footprint_area(fp, pixel_area_m2, threshold=0.95):
    """Smallest set of highest-weight pixels whose cumulative weight
    strictly exceeds the threshold; returns (area_m2, pixel_count).

    "Strictly" is read with 1e-9 slack so float accumulation cannot
    promote an exact-equality boundary; ties between equal weights are
    resolved by the cumulative count alone.
    """
    if not 0.0 < threshold < 1.0:
        raise DataError(f"threshold must be in (0, 1), got {threshold}")
    w = np.sort(np.asarray(fp, dtype=np.float64).ravel())[::-1]
    cum = np.cumsum(w)
    above = np.flatnonzero(cum > threshold + _AREA_EPS)
    k = int(above[0]) + 1 if above.size else w.size
    return k * pixel_area_m2, k


def footprint_centroid(fp):
    """Footprint-weighted mean cell coordinates (row_mean, col_mean) in
    the normalized (0,1) convention of the footprint arm."""
    fp = np.asarray(fp, dtype=np.float64)
    el, w = fp.shape
    coords = far_model.cell_coordinates(el, w)
    flat = fp.ravel()
    return float(flat @ coords[:, 1]), float(flat @ coords[:, 0])


def upwind_unit(wd_deg):
    """Unit vector from tower toward the wind's source in normalized
    (row, col) space."""
    wd = np.deg2rad(np.asarray(wd_deg, dtype=np.float64))
    return -np.cos(wd), np.sin(wd)


def centroid_is_upwind(centroid, wd_deg, grid_dims, tower_rc):
    """True when the centroid sits strictly in the upwind half-plane
    relative to the tower pixel."""
    el, w = grid_dims
    t_row = (tower_rc[0] + 0.5) / el
    t_col = (tower_rc[1] + 0.5) / w
    ur, uc = upwind_unit(wd_deg)
    return (centroid[0] - t_row) * ur + (centroid[1] - t_col) * uc > 0.0


@dataclass
class AreaCurve:
    variable: str
    xs: np.ndarray
    areas_m2: np.ndarray
    pixel_counts: np.ndarray
    hist_edges: np.ndarray = None
    hist_counts: np.ndarray = None

    def to_frame(self):
        return pd.DataFrame({self.variable: self.xs,
                             "area_m2": self.areas_m2,
                             "pixels": self.pixel_counts})

    def hist_frame(self):
        if self.hist_edges is None:
            return None
        return pd.DataFrame({"bin_lo": self.hist_edges[:-1],
                             "bin_hi": self.hist_edges[1:],
                             "count": self.hist_counts})


SCANNABLE = {name: i for i, name in enumerate(far_model.FP_VAR_NAMES)}


def scan_area(predictor, reference, variable, values, dataset_values=None,
              threshold=0.95, hist_bins=20):
    """Hold a reference footprint vector fixed, sweep one variable, and
    record the 95% footprint area at each value. Optionally attaches a
    histogram of the variable's support in the dataset."""
    if variable not in SCANNABLE:
        raise DataError(f"cannot scan {variable!r}; one of "
                        f"{sorted(SCANNABLE)}")
    ref = np.asarray(reference, dtype=np.float64).copy()
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or (values.size > 1 and not (np.diff(values) > 0).all()):
        raise DataError("scan values must be strictly increasing")
    pixel_area = predictor.pixel_size_m ** 2
    areas = np.empty(values.size)
    counts = np.empty(values.size, dtype=np.int64)
    for j, val in enumerate(values):
        v = ref.copy()
        v[SCANNABLE[variable]] = val
        fp = predictor.predict_footprint(v)
        areas[j], counts[j] = footprint_area(fp, pixel_area, threshold)
    curve = AreaCurve(variable, values, areas, counts)
    if dataset_values is not None:
        counts_h, edges = np.histogram(np.asarray(dataset_values), bins=hist_bins)
        curve.hist_edges = edges
        curve.hist_counts = counts_h
    return curve


def centroid_vs_wind(predictor, fp_vars, bins=16):
    """Centroids across samples, binned by wind direction. Returns a
    table with per-bin mean centroid and upwind fraction."""
    fp_vars = np.asarray(fp_vars, dtype=np.float64)
    el, w = predictor.grid_dims
    tower_rc = getattr(predictor, "tower_rc", None)
    if tower_rc is None:
        tower_rc = (el // 2, w // 2)
    width = 360.0 / bins
    idx = np.minimum((fp_vars[:, 0] // width).astype(int), bins - 1)
    rows = []
    cent = np.empty((fp_vars.shape[0], 2))
    up = np.empty(fp_vars.shape[0], dtype=bool)
    for i in range(fp_vars.shape[0]):
        fp = predictor.predict_footprint(fp_vars[i])
        cent[i] = footprint_centroid(fp)
        up[i] = centroid_is_upwind(cent[i], fp_vars[i, 0], (el, w), tower_rc)
    for b in range(bins):
        sel = idx == b
        if not sel.any():
            continue
        rows.append({"wd_center": (b + 0.5) * width, "count": int(sel.sum()),
                     "mean_row": float(cent[sel, 0].mean()),
                     "mean_col": float(cent[sel, 1].mean()),
                     "upwind_fraction": float(up[sel].mean())})
    return pd.DataFrame(rows)

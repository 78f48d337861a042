"""Metrics, temporal aggregation, the uniform-footprint baseline, and
permutation feature importance.

Unit conventions: half-hourly fluxes are umol CO2 m-2 s-1; aggregated
masses are Mg C ha-1 per period, using 12.011 g C per mol CO2. A month
or year enters the metric tables only when at least 90% of its
half-hours are present; the two models (and the targets) are always
aggregated over identical sample sets, so no model sees a window the
other does not.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import features, model as far_model, numerics
from .errors import DataError, ShapeError, UndefinedMetricError

SECONDS_PER_HALF_HOUR = 1800.0
G_CARBON_PER_UMOL = 12.011e-6      # g C per umol CO2
G_M2_TO_MG_HA = 1e-2               # g m-2 -> Mg ha-1
MASS_PER_UMOL_HALF_HOUR = SECONDS_PER_HALF_HOUR * G_CARBON_PER_UMOL \
    * G_M2_TO_MG_HA                # Mg C ha-1 per (umol m-2 s-1 half-hour)

COVERAGE_THRESHOLD = 0.90
HALF_HOURS_PER_DAY = 48


def r_squared(y, yhat):
    """1 - SSE/SST about the mean of y; negative when predictions do
    worse than predicting the mean."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1 or y.size == 0:
        raise ShapeError("r_squared needs equal-length nonempty vectors")
    sst = ((y - y.mean()) ** 2).sum()
    if sst == 0.0:
        raise UndefinedMetricError("zero target variance")
    return float(1.0 - ((y - yhat) ** 2).sum() / sst)


def rmse(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeError("rmse needs equal-length vectors")
    return float(np.sqrt(((y - yhat) ** 2).mean()))


def _expected_half_hours(period):
    if period.freqstr.startswith("M"):
        return period.days_in_month * HALF_HOURS_PER_DAY
    start = period.to_timestamp()
    end = (period + 1).to_timestamp()
    return int((end - start).days) * HALF_HOURS_PER_DAY


def aggregate_temporal(timestamps, series, freq, coverage=COVERAGE_THRESHOLD):
    """Integrate half-hourly fluxes into per-period masses.

    series: {name: values in umol m-2 s-1}. freq: "monthly" or "yearly".
    Returns a frame with one mass column per series (Mg C ha-1 per
    period), the period coverage, and an `included` flag for periods
    meeting the coverage threshold.
    """
    code = {"monthly": "M", "yearly": "Y"}.get(freq)
    if code is None:
        raise DataError(f"unknown aggregation frequency {freq!r}")
    ts = pd.DatetimeIndex(pd.to_datetime(timestamps))
    periods = ts.to_period(code)
    df = pd.DataFrame({name: np.asarray(v, dtype=np.float64)
                       * MASS_PER_UMOL_HALF_HOUR
                       for name, v in series.items()})
    df["period"] = periods
    g = df.groupby("period", sort=True)
    out = g.sum()
    out["n"] = g.size()
    out["expected"] = [_expected_half_hours(p) for p in out.index]
    out["coverage"] = out["n"] / out["expected"]
    out["included"] = out["coverage"] >= coverage
    return out.reset_index()


def uniform_baseline_features(patch_bands, angles, drivers, tower_rc):
    """Raw baseline feature vector: per-band mean over the center 5x5
    window, concatenated with the angles and drivers."""
    win = features.center_window_mean(patch_bands, tower_rc)
    return np.concatenate([win, np.asarray(angles, dtype=np.float64),
                           np.asarray(drivers, dtype=np.float64)])


@dataclass
class BaselineModel:
    """MLP over uniform-footprint features; the learned-footprint-free
    comparison model."""

    mlp: numerics.Mlp
    norm: far_model.NormStats
    band_names: tuple
    grid_dims: tuple
    pixel_size_m: float
    tower_rc: tuple
    seed: int

    def predict(self, patch_bands, angles, drivers):
        raw = uniform_baseline_features(patch_bands, angles, drivers,
                                        self.tower_rc)
        d = len(self.band_names)
        x = np.concatenate([
            self.norm.apply("bands", raw[:d]),
            self.norm.apply("angles", raw[d:d + 4]),
            self.norm.apply("drivers", raw[d + 4:]),
        ])
        out = numerics.mlp_forward_batch(self.mlp, x[None, :])[0, 0]
        return float(self.norm.invert("target", np.array([out]))[0])


def save_baseline_checkpoint(path, bmodel):
    header = {
        "format_version": far_model.CHECKPOINT_VERSION,
        "model_type": "baseline",
        "dims": list(bmodel.mlp.dims),
        "grid": {"L": bmodel.grid_dims[0], "W": bmodel.grid_dims[1],
                 "pixel_size_m": bmodel.pixel_size_m},
        "tower_rc": list(bmodel.tower_rc),
        "band_names": list(bmodel.band_names),
        "norm": bmodel.norm.to_dict(),
        "seed": bmodel.seed,
        "layout": "W,b per layer; row-major float32 little-endian",
    }
    arrays = []
    for w, b in zip(bmodel.mlp.weights, bmodel.mlp.biases):
        arrays.extend((w, b))
    far_model._write_blob(path, header, arrays)


def load_baseline_checkpoint(path):
    header, blob = far_model._read_blob(path)
    if header.get("model_type") != "baseline":
        raise DataError(f"{path}: not a baseline checkpoint")
    dims = header["dims"]
    off = 0
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w, off = far_model._take(blob, off, (fan_out, fan_in))
        b, off = far_model._take(blob, off, (fan_out,))
        ws.append(w)
        bs.append(b)
    grid = header["grid"]
    return BaselineModel(numerics.Mlp(ws, bs),
                         far_model.NormStats.from_dict(header["norm"]),
                         tuple(header["band_names"]),
                         (grid["L"], grid["W"]), grid["pixel_size_m"],
                         tuple(header["tower_rc"]), header["seed"])


def predict_far_series(model, bundle, idx=None, block=256, ws=None,
                       bufs=None):
    """Physical tower predictions for a site's samples."""
    if idx is None:
        idx = np.arange(bundle.n)
    if ws is None:
        ws = far_model.FarWorkspace(model)
    if bufs is None:
        bufs = features.AssemblyBuffers(block, model.grid_dims,
                                        bundle.bands_n.shape[2])
    out = np.empty(len(idx))
    for c0 in range(0, len(idx), block):
        sub = idx[c0:c0 + block]
        xf, xp, _ = features.assemble_far(bundle, sub, model.grid_dims,
                                          model.norm, bufs=bufs)
        yhat, _ = far_model.far_batch_predict(model, xf, xp, ws=ws)
        out[c0:c0 + len(sub)] = yhat
    return model.norm.invert("target", out[:, None])[:, 0]


def predict_baseline_series(bmodel, bundle, idx=None):
    if idx is None:
        idx = np.arange(bundle.n)
    x, _ = features.assemble_baseline(bundle, idx)
    pred = numerics.mlp_forward_batch(bmodel.mlp, x)[:, 0]
    return bmodel.norm.invert("target", pred[:, None])[:, 0]


def per_group_metrics(site_points, site_eco):
    """Pooled R^2 per ecosystem group over (y, yhat) points.

    site_points: {site_id: (y, yhat)}. Empty groups are skipped with a
    warning; groups whose pooled variance vanishes report R^2 = None.
    """
    rows = []
    groups = {}
    for sid, pts in site_points.items():
        groups.setdefault(site_eco[sid], []).append(pts)
    for eco in sorted(groups):
        ys = np.concatenate([p[0] for p in groups[eco]])
        yh = np.concatenate([p[1] for p in groups[eco]])
        if ys.size == 0:
            warnings.warn(f"ecosystem group {eco} has no evaluation points")
            continue
        try:
            r2 = r_squared(ys, yh)
        except UndefinedMetricError:
            r2 = None
        rows.append({"ecosystem": eco, "n_points": int(ys.size), "r2": r2})
    return pd.DataFrame(rows)


def outlier_sites(per_site_rmse):
    """Sites whose RMSE exceeds Q3 + 1.5 IQR (type-7 quartiles)."""
    if len(per_site_rmse) < 4:
        warnings.warn("fewer than 4 sites; outlier rule skipped")
        return []
    vals = np.array(list(per_site_rmse.values()), dtype=np.float64)
    q1, q3 = np.percentile(vals, [25.0, 75.0])
    cut = q3 + 1.5 * (q3 - q1)
    return sorted(sid for sid, v in per_site_rmse.items() if v > cut)


# ---------------------------------------------------------------------------
# permutation feature importance (the attribution stand-in)
# ---------------------------------------------------------------------------

def feature_names(model):
    return (list(model.band_names) + list(far_model.ANGLE_NAMES)
            + list(far_model.DRIVER_NAMES) + list(far_model.FP_VAR_NAMES))


def _far_predict_permuted(model, bundles_pairs, feature, perm):
    """Half-hour predictions with one feature column permuted across the
    pooled evaluation samples (perm=None gives the unpermuted baseline)."""
    rows = [(b, i) for b, idx in bundles_pairs for i in idx]
    n = len(rows)
    d = len(model.band_names)
    names = feature_names(model)
    if feature not in names:
        raise DataError(f"unknown feature {feature!r}")
    el, w = model.grid_dims
    coords = far_model.cell_coordinates(el, w)
    block = 256
    ws = far_model.FarWorkspace(model)
    xf_buf = np.empty((block, el * w, d + 7))
    xp_buf = np.empty((block, el * w, 9))
    out = np.empty(n)
    for c0 in range(0, n, block):
        sub = rows[c0:c0 + block]
        nb = len(sub)
        xf = xf_buf[:nb]
        fp_raw = np.empty((nb, 6))
        for j, (b, i) in enumerate(sub):
            src_b, src_i = (b, i) if perm is None else rows[perm[c0 + j]]
            ref = b.patch_ref[i]
            xf[j, :, :d] = b.bands_n[ref]
            xf[j, :, d:d + 4] = b.angles_n[ref]
            xf[j, :, d + 4:] = b.drivers_n[i]
            fp_raw[j] = b.fp_raw[i]
            if perm is not None:
                k = names.index(feature)
                if k < d:                      # band plane
                    xf[j, :, k] = src_b.bands_n[src_b.patch_ref[src_i], :, k]
                elif k < d + 4:                # angle
                    xf[j, :, k] = src_b.angles_n[src_b.patch_ref[src_i],
                                                 k - d]
                elif k < d + 7:                # driver
                    xf[j, :, k] = src_b.drivers_n[src_i, k - d - 4]
                else:                          # footprint variable
                    fp_raw[j, k - d - 7] = src_b.fp_raw[src_i, k - d - 7]
        feats = model.norm.apply("fp", far_model.encode_fp_vars(fp_raw))
        xp = xp_buf[:nb]
        xp[:, :, :feats.shape[1]] = feats[:, None, :]
        xp[:, :, feats.shape[1]:] = coords[None, :, :]
        yhat, _ = far_model.far_batch_predict(model, xf, xp, ws=ws)
        out[c0:c0 + nb] = yhat
    return model.norm.invert("target", out[:, None])[:, 0]


def permutation_importance(model, bundles_pairs, feature, seed, repeats=1):
    """R^2 drop after shuffling one feature column across the eval set,
    averaged over seeded repeats."""
    y = np.concatenate([b.y[idx] for b, idx in bundles_pairs])
    base = _far_predict_permuted(model, bundles_pairs, feature, None)
    base_r2 = r_squared(y, base)
    deltas = []
    for rep in range(repeats):
        rng = np.random.default_rng([seed, rep])
        perm = rng.permutation(len(y))
        pred = _far_predict_permuted(model, bundles_pairs, feature, perm)
        deltas.append(base_r2 - r_squared(y, pred))
    return {"feature": feature, "base_r2": base_r2,
            "delta_r2": float(np.mean(deltas)),
            "deltas": [float(x) for x in deltas]}


# ---------------------------------------------------------------------------
# the full evaluation protocol
# ---------------------------------------------------------------------------

def _pooled(frames, col_y, col_m):
    y = np.concatenate([f[col_y].to_numpy() for f in frames]) \
        if frames else np.empty(0)
    m = np.concatenate([f[col_m].to_numpy() for f in frames]) \
        if frames else np.empty(0)
    return y, m


def _metric_row(y, yhat, units, n_label="n"):
    row = {"rmse": rmse(y, yhat) if y.size else None, "units": units,
           n_label: int(y.size)}
    try:
        row["r2"] = r_squared(y, yhat) if y.size else None
    except UndefinedMetricError:
        warnings.warn(f"undefined R^2 for a {units} series")
        row["r2"] = None
    return row


def build_metric_report(dataset, splits, far, baseline=None, truth=None,
                        eval_roles=("val_site", "test_site"),
                        pixel_truth_cap=200, importance_features=None,
                        importance_cap=1500, seed=0):
    """Compute the full metric suite on withheld sites.

    Returns (report dict, tables dict of DataFrames). The report carries
    half-hour/monthly/yearly R^2+RMSE for the footprint model and the
    uniform baseline, per-site monthly RMSE, per-ecosystem pooled R^2,
    outlier sites, optional pixel-level agreement against generator
    ground truth, and optional permutation importances.
    """
    bundles = features.build_bundles(dataset, far.norm, splits)
    eval_sites = []
    for role in eval_roles:
        eval_sites.extend(splits.sites_with_role(role))
    eval_sites = sorted(set(eval_sites))
    if not eval_sites:
        raise DataError(f"no sites with roles {eval_roles}")

    per_site = {}
    monthly_frames, yearly_frames = [], []
    site_month_pts = {}
    for sid in eval_sites:
        b = bundles[sid]
        idx = np.flatnonzero(b.trainable)
        y = b.y[idx]
        preds = {"y": y, "far": predict_far_series(far, b, idx)}
        if baseline is not None:
            preds["baseline"] = predict_baseline_series(baseline, b, idx)
        ts = b.timestamps[idx]
        mon = aggregate_temporal(ts, preds, "monthly")
        yr = aggregate_temporal(ts, preds, "yearly")
        mon_inc = mon[mon["included"]]
        yr_inc = yr[yr["included"]]
        monthly_frames.append(mon_inc)
        yearly_frames.append(yr_inc)
        site_month_pts[sid] = (mon_inc["y"].to_numpy(),
                               mon_inc["far"].to_numpy())
        per_site[sid] = {
            "site_id": sid, "ecosystem": b.ecosystem,
            "n_half_hours": int(idx.size),
            "n_months": int(len(mon_inc)),
            "months_excluded": int((~mon["included"]).sum()),
            "rmse_monthly_far": rmse(mon_inc["y"], mon_inc["far"])
            if len(mon_inc) else None,
        }
        if baseline is not None and len(mon_inc):
            per_site[sid]["rmse_monthly_baseline"] = \
                rmse(mon_inc["y"], mon_inc["baseline"])
        per_site[sid]["_hh"] = (y, preds["far"],
                                preds.get("baseline"))

    freq_metrics = {}
    hh_y = np.concatenate([per_site[s]["_hh"][0] for s in eval_sites])
    hh_far = np.concatenate([per_site[s]["_hh"][1] for s in eval_sites])
    freq_metrics["half_hour"] = {
        "far": _metric_row(hh_y, hh_far, "umol CO2 m-2 s-1")}
    if baseline is not None:
        hh_base = np.concatenate([per_site[s]["_hh"][2] for s in eval_sites])
        freq_metrics["half_hour"]["baseline"] = \
            _metric_row(hh_y, hh_base, "umol CO2 m-2 s-1")
    for freq, frames, unit in (("monthly", monthly_frames, "Mg C ha-1 mo-1"),
                               ("yearly", yearly_frames, "Mg C ha-1 yr-1")):
        y, m = _pooled(frames, "y", "far")
        if y.size == 0:
            warnings.warn(f"no complete {freq} periods; table left empty")
            freq_metrics[freq] = {}
            continue
        freq_metrics[freq] = {"far": _metric_row(y, m, unit)}
        if baseline is not None:
            yb, mb = _pooled(frames, "y", "baseline")
            freq_metrics[freq]["baseline"] = _metric_row(yb, mb, unit)

    rmse_by_site = {s: per_site[s]["rmse_monthly_far"] for s in eval_sites
                    if per_site[s]["rmse_monthly_far"] is not None}
    eco_table = per_group_metrics(site_month_pts,
                                  {s: per_site[s]["ecosystem"]
                                   for s in eval_sites})

    report = {
        "eval_sites": eval_sites,
        "eval_roles": list(eval_roles),
        "frequencies": freq_metrics,
        "outlier_sites": outlier_sites(rmse_by_site),
    }

    if truth is not None:
        rng = np.random.default_rng([seed, 42])
        ys, yhs = [], []
        for sid in eval_sites:
            b = bundles[sid]
            idx = np.flatnonzero(b.trainable)
            if idx.size > pixel_truth_cap:
                idx = np.sort(rng.choice(idx, size=pixel_truth_cap,
                                         replace=False))
            xf, _, _ = features.assemble_far(b, idx, far.grid_dims, far.norm)
            pred = far.norm.invert(
                "target", far_model.flux_grid_batch(far, xf).reshape(-1, 1)
            )[:, 0]
            st = truth.sites[sid]
            true = st.type_flux[idx][:, st.type_map.ravel().astype(np.int64)]
            ys.append(true.ravel())
            yhs.append(pred)
        report["pixel_truth"] = {
            "r2": r_squared(np.concatenate(ys), np.concatenate(yhs)),
            "n_values": int(sum(len(v) for v in ys)),
        }

    if importance_features:
        rng = np.random.default_rng([seed, 77])
        pairs = []
        total = sum(np.flatnonzero(bundles[s].trainable).size
                    for s in eval_sites)
        cap = min(importance_cap, total)
        for sid in eval_sites:
            b = bundles[sid]
            idx = np.flatnonzero(b.trainable)
            take = max(1, int(round(cap * idx.size / total)))
            if idx.size > take:
                idx = np.sort(rng.choice(idx, size=take, replace=False))
            pairs.append((b, idx))
        report["permutation_importance"] = [
            permutation_importance(far, pairs, f, seed=seed)
            for f in importance_features]

    site_table = pd.DataFrame([{k: v for k, v in per_site[s].items()
                                if not k.startswith("_")}
                               for s in eval_sites])
    tables = {"per_site": site_table, "per_ecosystem": eco_table,
              "frequencies": _freq_table(freq_metrics)}
    report["per_site"] = site_table.to_dict(orient="records")
    report["per_ecosystem"] = eco_table.to_dict(orient="records")
    return report, tables


def _freq_table(freq_metrics):
    rows = []
    for freq in ("half_hour", "monthly", "yearly"):
        for mdl, m in freq_metrics.get(freq, {}).items():
            rows.append({"frequency": freq, "model": mdl, **m})
    return pd.DataFrame(rows)


def jsonable(obj):
    """Recursively convert numpy scalars/arrays so json.dumps accepts
    the report."""
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and np.isnan(obj):
        return None
    return obj


def write_report(report, tables, out_dir):
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(jsonable(report), indent=2,
                                                sort_keys=True))
    for name, df in tables.items():
        df.to_csv(out / f"{name}.csv", index=False)

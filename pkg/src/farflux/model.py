"""The two-arm footprint-aware regression model.

A pixel-wise flux MLP maps (band values, viewing/solar angles,
environmental drivers) to a per-pixel flux; a footprint MLP maps
(meteorological footprint predictors, normalized cell coordinates) to a
per-cell logit that a softmax over both spatial dimensions turns into a
footprint distribution. The tower-level prediction is the footprint-
weighted sum of pixel fluxes. The training loss is squared error plus a
lambda-weighted Shannon-entropy term on the footprint.

On the entropy term's sign: ``entropy_sign="prose"`` (default) adds
``lambda * H(FP)`` so positive lambda prefers concentrated footprints;
``"as_typeset"`` adds ``lambda * sum(FP ln FP)``, the opposite sign.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels, numerics
from .errors import DataError, NumericError, ShapeError

ANGLE_NAMES = ("SAA", "SZA", "VAA", "VZA")
DRIVER_NAMES = ("SW_IN", "TA", "RH")
FP_VAR_NAMES = ("WD", "WS", "USTAR", "TA", "H", "HEIGHT")
# wind direction enters as sin/cos to avoid the 0/360 wrap
FP_FEATURE_NAMES = ("WD_SIN", "WD_COS", "WS", "USTAR", "TA", "H", "HEIGHT")

CHECKPOINT_VERSION = 1
_TARGET_ROWS_PER_CHUNK = 8192  # keeps layer activations cache-resident


@dataclass
class NormStats:
    """Per-feature z-score statistics, grouped by feature block.

    Groups: "bands" [D], "angles" [4], "drivers" [3], "fp" [7],
    "target" [1]. Stds are clamped to 1 where a feature is constant.
    """

    groups: dict

    def apply(self, name, x):
        mean, std = self.groups[name]
        return (x - mean) / std

    def invert(self, name, x):
        mean, std = self.groups[name]
        return x * std + mean

    def to_dict(self):
        return {k: {"mean": list(map(float, m)), "std": list(map(float, s))}
                for k, (m, s) in self.groups.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({k: (np.asarray(v["mean"], dtype=np.float64),
                        np.asarray(v["std"], dtype=np.float64))
                    for k, v in d.items()})


@dataclass
class FarModel:
    flux_mlp: numerics.Mlp
    fp_mlp: numerics.Mlp
    norm: NormStats
    lam: float
    entropy_sign: str
    grid_dims: tuple           # (L, W)
    pixel_size_m: float
    tower_rc: tuple            # tower pixel (row, col)
    band_names: tuple
    seed: int

    @property
    def n_cells(self):
        return self.grid_dims[0] * self.grid_dims[1]


def build_far_model(band_names, grid_dims, pixel_size_m, tower_rc, norm,
                    lam, seed, hidden_width=64, hidden_layers=3,
                    entropy_sign="prose"):
    """Fresh model with seeded init. Flux arm input: bands + 4 angles +
    3 drivers; footprint arm input: 7 encoded predictors + 2 coordinates."""
    if entropy_sign not in ("prose", "as_typeset"):
        raise DataError(f"unknown entropy_sign {entropy_sign!r}")
    rng = np.random.default_rng(seed)
    d_flux = len(band_names) + len(ANGLE_NAMES) + len(DRIVER_NAMES)
    d_fp = len(FP_FEATURE_NAMES) + 2
    hidden = (hidden_width,) * hidden_layers
    flux = numerics.init_mlp((d_flux,) + hidden + (1,), rng)
    fp = numerics.init_mlp((d_fp,) + hidden + (1,), rng)
    return FarModel(flux, fp, norm, float(lam), entropy_sign,
                    tuple(grid_dims), float(pixel_size_m), tuple(tower_rc),
                    tuple(band_names), int(seed))


def model_parameters(model):
    """All trainable arrays in checkpoint order: flux W0,b0,W1,b1,...
    then footprint arm in the same pattern."""
    out = []
    for mlp in (model.flux_mlp, model.fp_mlp):
        for w, b in zip(mlp.weights, mlp.biases):
            out.append(w)
            out.append(b)
    return out


def snapshot_parameters(model):
    return [p.copy() for p in model_parameters(model)]


def restore_parameters(model, snapshot):
    for p, s in zip(model_parameters(model), snapshot):
        p[...] = s


@lru_cache(maxsize=8)
def cell_coordinates(el, w):
    """Normalized cell-center coordinates: columns (x_w, y_l) for the
    row-major flattened grid, with x_w=(w+0.5)/W and y_l=(l+0.5)/L."""
    ll, ww = np.meshgrid(np.arange(el), np.arange(w), indexing="ij")
    coords = np.empty((el * w, 2), dtype=np.float64)
    coords[:, 0] = ((ww + 0.5) / w).ravel()
    coords[:, 1] = ((ll + 0.5) / el).ravel()
    coords.setflags(write=False)
    return coords


def encode_fp_vars(fp_vars):
    """(WD, WS, USTAR, TA, H, HEIGHT) -> 7 raw features with WD as sin/cos.
    Works on a single vector or an [n, 6] array."""
    v = np.asarray(fp_vars, dtype=np.float64)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    if v.shape[1] != 6:
        raise ShapeError(f"footprint vector must have 6 entries, got {v.shape}")
    wd = np.deg2rad(v[:, 0])
    out = np.column_stack([np.sin(wd), np.cos(wd), v[:, 1:]])
    return out[0] if single else out


def flux_feature_matrix(model, bands, angles, drivers):
    """Normalized flux-arm inputs, one row per pixel: [P, D + 4 + 3]."""
    el, w = model.grid_dims
    bands = np.asarray(bands, dtype=np.float64)
    if bands.shape != (el, w, len(model.band_names)):
        raise ShapeError(f"patch shape {bands.shape} does not match grid "
                         f"{(el, w, len(model.band_names))}")
    angles = np.asarray(angles, dtype=np.float64)
    drivers = np.asarray(drivers, dtype=np.float64)
    if drivers.shape != (3,):
        raise ShapeError(f"expected 3 drivers, got shape {drivers.shape}")
    if not np.isfinite(drivers).all():
        raise DataError("missing or non-finite environmental driver")
    if angles.shape != (4,) or not np.isfinite(angles).all():
        raise DataError("missing or non-finite viewing/solar angles")
    bn = model.norm.apply("bands", bands.reshape(-1, bands.shape[2]))
    if not np.isfinite(bn).all():
        raise DataError("non-finite band value after normalization")
    x = np.empty((bn.shape[0], bn.shape[1] + 7), dtype=np.float64)
    x[:, :bn.shape[1]] = bn
    x[:, bn.shape[1]:bn.shape[1] + 4] = model.norm.apply("angles", angles)
    x[:, bn.shape[1] + 4:] = model.norm.apply("drivers", drivers)
    return x


def fp_feature_matrix(model, fp_vars):
    """Normalized footprint-arm inputs per cell: [P, 7 + 2]; the two
    coordinate channels stay in (0, 1) unscaled."""
    v = np.asarray(fp_vars, dtype=np.float64)
    if v.shape != (6,):
        raise ShapeError(f"expected 6 footprint variables, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise DataError("missing or non-finite footprint variable")
    feats = model.norm.apply("fp", encode_fp_vars(v))
    el, w = model.grid_dims
    coords = cell_coordinates(el, w)
    x = np.empty((coords.shape[0], feats.shape[0] + 2), dtype=np.float64)
    x[:, :feats.shape[0]] = feats
    x[:, feats.shape[0]:] = coords
    return x


def predict_pixel_flux(model, bands, angles, drivers):
    """Per-pixel flux grid in physical units (umol CO2 m-2 s-1). Each
    cell depends only on its own bands plus the shared angles/drivers."""
    x = flux_feature_matrix(model, bands, angles, drivers)
    el, w = model.grid_dims
    f = numerics.mlp_forward_batch(model.flux_mlp, x)[:, 0]
    return model.norm.invert("target", f).reshape(el, w)


def predict_footprint(model, fp_vars):
    """Footprint grid: footprint MLP per cell, softmax over the grid."""
    x = fp_feature_matrix(model, fp_vars)
    el, w = model.grid_dims
    logits = numerics.mlp_forward_batch(model.fp_mlp, x)[:, 0]
    return numerics.softmax_2d(logits.reshape(el, w))


def aggregate(flux, fp):
    """Footprint-weighted sum of the flux grid (element-wise product)."""
    flux = np.asarray(flux, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    if flux.shape != fp.shape:
        raise ShapeError(f"flux {flux.shape} vs footprint {fp.shape}")
    return float(np.vdot(flux, fp))


def far_forward(model, bands, angles, drivers, fp_vars):
    """Full forward pass; returns (prediction, footprint, flux grid) so
    diagnostics can inspect both intermediates."""
    flux = predict_pixel_flux(model, bands, angles, drivers)
    fp = predict_footprint(model, fp_vars)
    return aggregate(flux, fp), fp, flux


def entropy(fp):
    """Shannon entropy of a footprint, with the 0 ln 0 summand as 0."""
    fp = np.asarray(fp, dtype=np.float64)
    return float(kernels.entropy_rows(np.ascontiguousarray(fp.reshape(1, -1)))[0])


def far_loss(targets, predictions, footprints, lam, entropy_sign="prose"):
    """Summed squared error plus the lambda-weighted entropy term.

    Under "prose", positive lambda penalizes footprint entropy (prefers
    small footprints); "as_typeset" flips the term's sign.
    """
    y = np.asarray(targets, dtype=np.float64)
    yh = np.asarray(predictions, dtype=np.float64)
    fps = np.asarray(footprints, dtype=np.float64)
    if y.shape != yh.shape or fps.shape[0] != y.shape[0]:
        raise ShapeError("targets/predictions/footprints batch sizes differ")
    h = kernels.entropy_rows(np.ascontiguousarray(fps.reshape(fps.shape[0], -1)))
    sgn = 1.0 if entropy_sign == "prose" else -1.0
    if entropy_sign not in ("prose", "as_typeset"):
        raise DataError(f"unknown entropy_sign {entropy_sign!r}")
    return float(((y - yh) ** 2).sum() + sgn * lam * h.sum())


def _chunk_size(n_cells):
    return max(1, _TARGET_ROWS_PER_CHUNK // n_cells)


class FarWorkspace:
    """Preallocated buffers for chunked forward/backward passes over
    both arms. One instance is reused across every chunk and step; all
    large intermediates live here so hot loops allocate nothing big."""

    def __init__(self, model, chunk_samples=None):
        p = model.n_cells
        self.chunk = chunk_samples or _chunk_size(p)
        rows = self.chunk * p
        self.flux = numerics.MlpWorkspace(model.flux_mlp.dims, rows)
        self.fp = numerics.MlpWorkspace(model.fp_mlp.dims, rows)
        self.up_f = np.empty((rows, 1))
        self.up_p = np.empty((rows, 1))

    def load(self, model):
        self.flux.load(model.flux_mlp)
        self.fp.load(model.fp_mlp)


def far_batch_predict(model, xf, xp, want_footprints=False, ws=None):
    """Normalized tower predictions for prepared feature tensors.

    xf: [B, P, Df], xp: [B, P, Dp]. Returns (yhat_norm [B], entropy [B])
    and, if requested, the footprints [B, P].
    """
    b, p, _ = xf.shape
    if ws is None:
        ws = FarWorkspace(model)
    ws.load(model)
    yhat = np.empty(b)
    ent = np.empty(b)
    fps = np.empty((b, p)) if want_footprints else None
    for c0 in range(0, b, ws.chunk):
        c1 = min(c0 + ws.chunk, b)
        n = c1 - c0
        f = numerics.forward_into(model.flux_mlp,
                                  xf[c0:c1].reshape(n * p, -1), ws.flux)
        z = numerics.forward_into(model.fp_mlp,
                                  xp[c0:c1].reshape(n * p, -1), ws.fp)
        fp = kernels.softmax_rows(np.ascontiguousarray(z.reshape(n, p)))
        yhat[c0:c1] = (f.reshape(n, p) * fp).sum(axis=1)
        ent[c0:c1] = kernels.entropy_rows(fp)
        if want_footprints:
            fps[c0:c1] = fp
    if want_footprints:
        return yhat, ent, fps
    return yhat, ent


def flux_grid_batch(model, xf, ws=None):
    """Normalized per-pixel flux for prepared features xf: [B, P, Df]."""
    b, p, _ = xf.shape
    if ws is None:
        ws = FarWorkspace(model)
    ws.load(model)
    out = np.empty((b, p))
    for c0 in range(0, b, ws.chunk):
        c1 = min(c0 + ws.chunk, b)
        n = c1 - c0
        f = numerics.forward_into(model.flux_mlp,
                                  xf[c0:c1].reshape(n * p, -1), ws.flux)
        out[c0:c1] = f.reshape(n, p)
    return out


def far_loss_gradients(model, xf, xp, y_norm, ws=None):
    """Mean batch loss and its gradients w.r.t. model_parameters(model).

    The backward pass is hand-derived for this fixed graph: loss ->
    aggregate -> (flux MLP, softmax -> footprint MLP). Processes the
    batch in cache-sized chunks of whole samples; accumulation order is
    fixed, so results are deterministic.
    """
    b, p, _ = xf.shape
    if ws is None:
        ws = FarWorkspace(model)
    ws.load(model)
    grads = [np.zeros_like(a) for a in model_parameters(model)]
    nf = model.flux_mlp.n_layers
    sgn = 1.0 if model.entropy_sign == "prose" else -1.0
    lam_s = sgn * model.lam
    scale = 1.0 / b
    loss = 0.0
    for c0 in range(0, b, ws.chunk):
        c1 = min(c0 + ws.chunk, b)
        n = c1 - c0
        xfc = xf[c0:c1].reshape(n * p, -1)
        xpc = xp[c0:c1].reshape(n * p, -1)
        f, acts_f = numerics.forward_into(model.flux_mlp, xfc, ws.flux,
                                          keep_activations=True)
        z, acts_p = numerics.forward_into(model.fp_mlp, xpc, ws.fp,
                                          keep_activations=True)
        fr = f.reshape(n, p)
        fp = kernels.softmax_rows(np.ascontiguousarray(z.reshape(n, p)))
        yhat = (fr * fp).sum(axis=1)
        err = yhat - y_norm[c0:c1]
        h = kernels.entropy_rows(fp)
        loss += float((err ** 2).sum() + lam_s * h.sum())

        dyhat = (2.0 * scale) * err
        df = ws.up_f[:n * p].reshape(n, p)
        np.multiply(dyhat[:, None], fp, out=df)
        dfp = dyhat[:, None] * fr
        if model.lam != 0.0:
            # d(lam_s * H)/dFP = -lam_s * (ln FP + 1); guard exact zeros
            # from softmax underflow (their contribution vanishes).
            lnfp = np.log(np.maximum(fp, 1e-300))
            dfp -= (lam_s * scale) * (lnfp + 1.0)
        dz = kernels.softmax_backward(fp, dfp)
        dzu = ws.up_p[:n * p].reshape(n, p)
        np.copyto(dzu, dz)

        gf, _ = numerics.backward_into(model.flux_mlp, acts_f,
                                       ws.up_f[:n * p], ws.flux)
        gp, _ = numerics.backward_into(model.fp_mlp, acts_p,
                                       ws.up_p[:n * p], ws.fp)
        for k, (dw, db) in enumerate(gf):
            grads[2 * k] += dw
            grads[2 * k + 1] += db
        for k, (dw, db) in enumerate(gp):
            grads[2 * (nf + k)] += dw
            grads[2 * (nf + k) + 1] += db
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss * scale, grads


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line + little-endian float32 parameter blob
# ---------------------------------------------------------------------------

def _write_blob(path, header, arrays):
    blob = b"".join(np.asarray(a, dtype="<f4").tobytes(order="C")
                    for a in arrays)
    header = dict(header)
    header["blob_bytes"] = len(blob)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        fh.write(blob)


def _read_blob(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        blob = fh.read()
    if len(blob) != header["blob_bytes"]:
        raise DataError(f"checkpoint blob truncated: {len(blob)} of "
                        f"{header['blob_bytes']} bytes")
    return header, blob


def _take(blob, offset, shape):
    n = int(np.prod(shape))
    arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
    return arr.reshape(shape).astype(np.float64), offset + 4 * n


def save_checkpoint(path, model):
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_type": "far",
        "flux_dims": list(model.flux_mlp.dims),
        "fp_dims": list(model.fp_mlp.dims),
        "lambda": model.lam,
        "entropy_sign": model.entropy_sign,
        "grid": {"L": model.grid_dims[0], "W": model.grid_dims[1],
                 "pixel_size_m": model.pixel_size_m},
        "tower_rc": list(model.tower_rc),
        "band_names": list(model.band_names),
        "angle_names": list(ANGLE_NAMES),
        "driver_names": list(DRIVER_NAMES),
        "fp_feature_names": list(FP_FEATURE_NAMES),
        "norm": model.norm.to_dict(),
        "seed": model.seed,
        "layout": "flux arm W,b per layer then footprint arm; "
                  "row-major float32 little-endian",
    }
    _write_blob(path, header, model_parameters(model))


def load_checkpoint(path):
    header, blob = _read_blob(path)
    if header.get("model_type") != "far":
        raise DataError(f"{path}: not a far checkpoint "
                        f"(model_type={header.get('model_type')!r})")
    norm = NormStats.from_dict(header["norm"])
    off = 0
    mlps = []
    for dims in (header["flux_dims"], header["fp_dims"]):
        ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w, off = _take(blob, off, (fan_out, fan_in))
            bvec, off = _take(blob, off, (fan_out,))
            ws.append(w)
            bs.append(bvec)
        mlps.append(numerics.Mlp(ws, bs))
    grid = header["grid"]
    model = FarModel(mlps[0], mlps[1], norm, header["lambda"],
                     header["entropy_sign"], (grid["L"], grid["W"]),
                     grid["pixel_size_m"], tuple(header["tower_rc"]),
                     tuple(header["band_names"]), header["seed"])
    model.flux_mlp.validate()
    model.fp_mlp.validate()
    return model

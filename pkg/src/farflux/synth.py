"""Synthetic landscapes with known per-pixel fluxes and footprints.

Each site is a mosaic of regions drawn from a small library of region
types. A type fixes both the spectral signature of its pixels and its
flux response to drivers:

    FC = -a * SW_IN / (SW_IN + s) + r * q10 ** ((TA - 10) / 10)

(rectangular-hyperbola light response minus temperature-dependent
respiration, in umol CO2 m-2 s-1, negative = drawdown). Because the
response is tied to the spectral signature, pixel-level fluxes are
recoverable from tower-level aggregates - which is exactly what the
verification suite checks.

Tower measurements are the true footprint-weighted average of pixel
fluxes plus optional Gaussian noise, where the true footprint is the
analytic plume driven by each half-hour's wind and friction velocity.
The returned GroundTruth can reconstruct every per-pixel flux map and
every per-sample footprint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import kernels
from .dataset import (QUALITY_CLOUD, QUALITY_VALID, Dataset, SiteData,
                      SitePatches, rle_decode, rle_encode)
from .errors import ConfigError
from .footprint import PlumeParams, analytic_plume

HALF_HOURS_PER_DAY = 48
PATCH_CADENCE_DAYS = 16


@dataclass(frozen=True)
class RegionType:
    name: str
    a: float           # light-response amplitude
    s: float           # half-saturation SW_IN (W m-2)
    r: float           # base respiration at 10 degC
    q10: float         # respiration temperature sensitivity
    bands: tuple       # mean reflectance per band

    def flux(self, sw_in, ta):
        return (-self.a * sw_in / (sw_in + self.s)
                + self.r * self.q10 ** ((ta - 10.0) / 10.0))


DEFAULT_REGION_TYPES = (
    RegionType("forest", a=24.0, s=350.0, r=3.2, q10=2.2,
               bands=(0.03, 0.04, 0.35, 0.15)),
    RegionType("grass", a=14.0, s=250.0, r=2.0, q10=2.0,
               bands=(0.06, 0.10, 0.30, 0.25)),
    RegionType("wetland", a=9.0, s=200.0, r=4.0, q10=1.8,
               bands=(0.05, 0.06, 0.20, 0.08)),
    RegionType("bare", a=1.5, s=300.0, r=0.8, q10=1.5,
               bands=(0.12, 0.20, 0.28, 0.40)),
)


@dataclass
class SynthConfig:
    n_sites: int = 12
    days: int = 365
    start: str = "2021-01-01"
    grid_dims: tuple = (32, 32)
    pixel_size_m: float = 30.0
    band_names: tuple = ("blue", "red", "nir", "swir1")
    region_types: tuple = DEFAULT_REGION_TYPES
    types_per_site: int = 2
    geometries: tuple = ("half_plane", "quadrant", "disk")
    ecosystems: tuple = ("SYN",)
    noise_rel: float = 0.10        # noise sd as fraction of tower-flux sd
    band_noise: float = 0.015
    cloud_fraction: float = 0.0
    height_range: tuple = (3.0, 9.0)
    wind_prevailing_frac: float = 0.7
    wind_spread_deg: float = 45.0
    plume: PlumeParams = field(default_factory=PlumeParams)

    def validate(self):
        if self.n_sites < 1 or self.days < 1:
            raise ConfigError("need at least one site and one day")
        if self.types_per_site not in (1, 2):
            raise ConfigError("types_per_site must be 1 or 2")
        if len(self.region_types) < self.types_per_site:
            raise ConfigError("not enough region types configured")
        for rt in self.region_types:
            if len(rt.bands) != len(self.band_names):
                raise ConfigError(f"region type {rt.name!r} has "
                                  f"{len(rt.bands)} band means, dataset has "
                                  f"{len(self.band_names)} bands")
        if not 0.0 <= self.cloud_fraction < 1.0:
            raise ConfigError("cloud_fraction must be in [0, 1)")


@dataclass
class SiteTruth:
    type_map: np.ndarray        # [L, W] int8, local type index
    type_names: tuple           # local index -> region type name
    type_flux: np.ndarray       # [N, K] per-type flux over time
    tower_true: np.ndarray      # [N] noise-free tower flux
    height: float
    noise_sigma: float


@dataclass
class GroundTruth:
    grid_dims: tuple
    pixel_size_m: float
    tower_rc: tuple
    plume: PlumeParams
    region_types: tuple
    sites: dict                 # site_id -> SiteTruth

    def flux_map(self, site_id, sample_idx):
        st = self.sites[site_id]
        return st.type_flux[sample_idx][st.type_map]

    def footprint(self, site_id, wd, ustar):
        st = self.sites[site_id]
        vec = np.array([wd, 0.0, ustar, 0.0, 0.0, st.height])
        return analytic_plume(vec, self.plume, self.grid_dims,
                              self.pixel_size_m, self.tower_rc)


def _type_map(cfg, rng):
    el, w = cfg.grid_dims
    tr, tc = el // 2, w // 2
    rr, cc = np.meshgrid(np.arange(el), np.arange(w), indexing="ij")
    dx = (cc - tc).astype(np.float64)
    dy = (tr - rr).astype(np.float64)
    geom = cfg.geometries[int(rng.integers(len(cfg.geometries)))]
    if cfg.types_per_site == 1:
        return np.zeros((el, w), dtype=np.int8), geom
    if geom == "half_plane":
        phi = np.deg2rad(rng.uniform(0.0, 360.0))
        off = rng.uniform(-4.0, 4.0)
        side = dx * np.sin(phi) + dy * np.cos(phi) >= off
    elif geom == "quadrant":
        phi = np.deg2rad(rng.uniform(0.0, 360.0))
        s1 = dx * np.sin(phi) + dy * np.cos(phi) >= 0
        s2 = dx * np.cos(phi) - dy * np.sin(phi) >= 0
        side = s1 & s2
    elif geom == "disk":
        cy, cx = rng.uniform(-5.0, 5.0, size=2)
        rad = rng.uniform(6.0, 12.0)
        side = (dx - cx) ** 2 + (dy - cy) ** 2 <= rad ** 2
    else:
        raise ConfigError(f"unknown region geometry {geom!r}")
    return side.astype(np.int8), geom


def _drivers(cfg, rng, n):
    """Half-hourly SW_IN/TA/RH/WD/WS/USTAR/H series for one site."""
    t = np.arange(n)
    day = t // HALF_HOURS_PER_DAY
    hod = (t % HALF_HOURS_PER_DAY) / 2.0

    sw_peak = 550.0 + 350.0 * np.cos(2 * np.pi * (day - 172) / 365.0)
    elev = np.sin(np.pi * (hod - 6.0) / 12.0)
    elev = np.where((hod >= 6.0) & (hod <= 18.0), np.maximum(elev, 0.0), 0.0)
    cloud = rng.uniform(0.55, 1.0, size=cfg.days + 1)[day]
    sw = sw_peak * elev ** 1.2 * cloud * rng.uniform(0.94, 1.06, size=n)
    sw = np.where(elev > 0.0, np.maximum(sw, 0.0), 0.0)

    day_noise = rng.normal(0.0, 1.8, size=cfg.days + 1)[day]
    ta = (9.0 + 10.0 * np.cos(2 * np.pi * (day - 202) / 365.0)
          + 4.0 * np.cos(2 * np.pi * (hod - 15.0) / 24.0)
          + day_noise + rng.normal(0.0, 0.6, size=n))
    rh = np.clip(72.0 - 0.025 * sw + rng.normal(0.0, 6.0, size=n), 15.0, 100.0)

    mu_wd = rng.uniform(0.0, 360.0)
    prevailing = (mu_wd + rng.normal(0.0, cfg.wind_spread_deg, size=n)) % 360.0
    uniform = rng.uniform(0.0, 360.0, size=n)
    wd = np.where(rng.uniform(size=n) < cfg.wind_prevailing_frac,
                  prevailing, uniform)
    ws = np.clip(rng.lognormal(1.0, 0.45, size=n), 0.3, 15.0)
    ustar = np.clip(0.11 * ws * (1.0 + rng.normal(0.0, 0.15, size=n)),
                    0.05, 1.5)
    h = 0.35 * sw - 25.0 + rng.normal(0.0, 12.0, size=n)
    return sw, ta, rh, wd, ws, ustar, h


def generate_synthetic(cfg, seed):
    """Deterministic (config, seed) -> (Dataset, GroundTruth)."""
    cfg.validate()
    el, w = cfg.grid_dims
    tower_rc = (el // 2, w // 2)
    n = cfg.days * HALF_HOURS_PER_DAY
    start = np.datetime64(cfg.start + "T00:00:00", "s")
    sample_ts = start + np.arange(n) * np.timedelta64(30 * 60, "s")

    patch_days = np.arange(0, cfg.days, PATCH_CADENCE_DAYS)
    patch_ts = start + (patch_days * 86400 + 10 * 3600 + 30 * 60) \
        * np.timedelta64(1, "s")
    patch_ts[0] = start  # guarantee a patch at or before every sample

    sites = []
    truths = {}
    for i in range(cfg.n_sites):
        rng = np.random.default_rng([int(seed), i])
        site_id = f"SYN{i:03d}"
        eco = cfg.ecosystems[i % len(cfg.ecosystems)]
        height = float(rng.uniform(*cfg.height_range))
        type_map, _ = _type_map(cfg, rng)
        k = cfg.types_per_site
        chosen = rng.choice(len(cfg.region_types), size=k, replace=False)
        types = tuple(cfg.region_types[j] for j in chosen)

        sw, ta, rh, wd, ws, ustar, h = _drivers(cfg, rng, n)
        type_flux = np.column_stack([rt.flux(sw, ta) for rt in types])

        peak = cfg.plume.peak_scale * height / np.maximum(ustar, cfg.plume.u_min)
        masses = kernels.plume_type_masses(
            np.ascontiguousarray(wd), np.ascontiguousarray(peak),
            np.ascontiguousarray(cfg.plume.along_spread * peak),
            np.ascontiguousarray(cfg.plume.cross_spread * peak),
            type_map, k, cfg.pixel_size_m, tower_rc[0], tower_rc[1])
        if np.isnan(masses).any():
            raise ConfigError(f"site {site_id}: footprint escaped the grid; "
                              f"reduce plume peak_scale or tower heights")
        tower_true = (type_flux * masses).sum(axis=1)
        noise_sigma = float(cfg.noise_rel * tower_true.std())
        fc = tower_true + (rng.normal(0.0, noise_sigma, size=n)
                           if noise_sigma > 0 else 0.0)

        base = np.zeros((el, w, len(cfg.band_names)))
        for j, rt in enumerate(types):
            base[type_map == j] = rt.bands
        n_p = len(patch_ts)
        bands = (base[None] + rng.normal(0.0, cfg.band_noise,
                                         size=(n_p, el, w, len(cfg.band_names)))
                 ).astype(np.float32)
        quality = np.zeros((n_p, el, w), dtype=np.uint8)
        if cfg.cloud_fraction > 0 and n_p > 1:
            cloudy = rng.uniform(size=(n_p - 1, el, w)) < cfg.cloud_fraction
            quality[1:][cloudy] = QUALITY_CLOUD

        pd_day = patch_days.astype(np.float64)
        sza = 35.0 - 12.0 * np.cos(2 * np.pi * (pd_day - 172) / 365.0) \
            + rng.normal(0.0, 2.0, size=n_p)
        saa = 150.0 + rng.normal(0.0, 8.0, size=n_p)
        vza = np.abs(rng.normal(0.0, 3.0, size=n_p))
        vaa = (100.0 + rng.normal(0.0, 15.0, size=n_p)) % 360.0

        patch_ref = np.searchsorted(patch_ts, sample_ts, side="right") - 1
        df = pd.DataFrame({
            "timestamp": pd.to_datetime(sample_ts),
            "SW_IN": sw, "TA": ta, "RH": rh, "WD": wd, "WS": ws,
            "USTAR": ustar, "H": h, "FC": fc, "patch_ref": patch_ref,
        })
        angles = np.column_stack([saa, sza, vaa, vza])
        patches = SitePatches(patch_ts.copy(), bands, quality, angles)
        sites.append(SiteData(site_id, eco, height, df, patches))
        truths[site_id] = SiteTruth(type_map, tuple(rt.name for rt in types),
                                    type_flux, tower_true, height, noise_sigma)

    ds = Dataset((el, w), cfg.pixel_size_m, tuple(cfg.band_names), sites)
    gt = GroundTruth((el, w), cfg.pixel_size_m, tower_rc, cfg.plume,
                     cfg.region_types, truths)
    return ds, gt


def save_ground_truth(gt, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "grid": {"L": gt.grid_dims[0], "W": gt.grid_dims[1],
                 "pixel_size_m": gt.pixel_size_m},
        "tower_rc": list(gt.tower_rc),
        "plume": gt.plume.to_dict(),
        "region_types": [{"name": rt.name, "a": rt.a, "s": rt.s, "r": rt.r,
                          "q10": rt.q10, "bands": list(rt.bands)}
                         for rt in gt.region_types],
        "sites": {sid: {"height": st.height, "noise_sigma": st.noise_sigma,
                        "type_names": list(st.type_names),
                        "type_map_rle": rle_encode(st.type_map.ravel())}
                  for sid, st in gt.sites.items()},
    }
    (path / "gt.json").write_text(json.dumps(manifest, indent=2,
                                             sort_keys=True))
    for sid, st in gt.sites.items():
        sdir = path / sid
        sdir.mkdir(exist_ok=True)
        df = pd.DataFrame({"tower_true": st.tower_true})
        for j, name in enumerate(st.type_names):
            df[f"fc_{name}"] = st.type_flux[:, j]
        df.to_csv(sdir / "truth.csv", index=False)


def load_ground_truth(path):
    path = Path(path)
    manifest = json.loads((path / "gt.json").read_text())
    grid = manifest["grid"]
    el, w = grid["L"], grid["W"]
    plume = PlumeParams(**manifest["plume"])
    region_types = tuple(RegionType(rt["name"], rt["a"], rt["s"], rt["r"],
                                    rt["q10"], tuple(rt["bands"]))
                         for rt in manifest["region_types"])
    sites = {}
    for sid, entry in manifest["sites"].items():
        df = pd.read_csv(path / sid / "truth.csv")
        names = tuple(entry["type_names"])
        type_flux = df[[f"fc_{n}" for n in names]].to_numpy(dtype=np.float64)
        type_map = rle_decode(entry["type_map_rle"], el * w) \
            .astype(np.int8).reshape(el, w)
        sites[sid] = SiteTruth(type_map, names, type_flux,
                               df["tower_true"].to_numpy(dtype=np.float64),
                               float(entry["height"]),
                               float(entry["noise_sigma"]))
    return GroundTruth((el, w), float(grid["pixel_size_m"]),
                       tuple(manifest["tower_rc"]), plume, region_types, sites)

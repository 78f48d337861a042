"""Sample cleaning, patch gap-filling, rotation augmentation, splits.

Cleaning applies three drop rules per site (after removing rows with
missing required fields): carbon-flux values outside the site's central
99% band, negative incoming shortwave, and apparent drawdown with zero
incoming radiation. The percentile band uses nearest-rank cutoffs: with
m = ceil(0.005 n), the m lowest and m highest FC values are dropped
(comparison inclusive at the cutoff values).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .dataset import QUALITY_VALID, SiteData
from .errors import DataError

REQUIRED_FIELDS = ("SW_IN", "TA", "RH", "WD", "WS", "USTAR", "H", "FC")

# per-sample split labels for training-role sites
TRAIN, VAL, VAL_FUTURE, TEST_FUTURE = 0, 1, 2, 3
LABEL_NAMES = {TRAIN: "train", VAL: "val", VAL_FUTURE: "val_future",
               TEST_FUTURE: "test_future"}


def clean_samples(site):
    """Returns (cleaned SiteData, report). Each dropped sample is counted
    under the first matching rule: missing -> fc_percentile ->
    negative_sw_in -> night_drawdown."""
    df = site.samples
    n = len(df)
    missing = df[list(REQUIRED_FIELDS)].isna().any(axis=1).to_numpy()

    fc = df["FC"].to_numpy(dtype=np.float64)
    fc_ok = fc[~np.isnan(fc)]
    out_of_band = np.zeros(n, dtype=bool)
    if fc_ok.size:
        m = math.ceil(0.005 * fc_ok.size)
        v = np.sort(fc_ok)
        lo, hi = v[m - 1], v[fc_ok.size - m]
        with np.errstate(invalid="ignore"):
            out_of_band = (fc <= lo) | (fc >= hi)
        out_of_band &= ~np.isnan(fc)

    sw = df["SW_IN"].to_numpy(dtype=np.float64)
    with np.errstate(invalid="ignore"):
        neg_sw = sw < 0
        night_draw = (fc < 0) & (sw == 0)

    drop_missing = missing
    drop_band = out_of_band & ~drop_missing
    drop_sw = neg_sw & ~drop_missing & ~drop_band
    drop_night = night_draw & ~drop_missing & ~drop_band & ~drop_sw
    drop = drop_missing | drop_band | drop_sw | drop_night

    kept = df.loc[~drop].reset_index(drop=True)
    if len(kept) == 0:
        raise DataError(f"site {site.site_id}: no samples survive cleaning")
    report = {
        "input": int(n),
        "kept": int(len(kept)),
        "dropped": {
            "missing": int(drop_missing.sum()),
            "fc_percentile": int(drop_band.sum()),
            "negative_sw_in": int(drop_sw.sum()),
            "night_drawdown": int(drop_night.sum()),
        },
    }
    return SiteData(site.site_id, site.ecosystem, site.tower_height_m,
                    kept, site.patches), report


def clean_dataset(ds):
    """Clean every site; returns (dataset, {site_id: report})."""
    reports = {}
    sites = []
    for s in ds.sites:
        cleaned, rep = clean_samples(s)
        sites.append(cleaned)
        reports[s.site_id] = rep
    ds.sites = sites
    return ds, reports


def gap_fill_patches(patches):
    """Replace invalid pixels with the most recent prior valid value at
    the same location, in place. Pixels with no valid observation yet are
    flagged in patches.never_observed (used to exclude the samples that
    reference such frames from training). Idempotent."""
    valid = patches.quality == QUALITY_VALID
    patches.never_observed = kernels.forward_fill(patches.bands,
                                                  np.ascontiguousarray(valid))
    return patches


def rotate_augment(bands, wd, angle=None, rng=None):
    """Rotate a patch counterclockwise (map frame) about its center and
    shift the meteorological wind direction to match: wd' = wd - angle.

    Right-angle multiples are exact index permutations; anything else is
    bilinear with edge clamping. If angle is None it is drawn uniformly
    from [0, 360) using rng.
    """
    if angle is None:
        if rng is None:
            raise DataError("rotate_augment needs an angle or an rng")
        angle = float(rng.uniform(0.0, 360.0))
    if angle % 90.0 == 0.0:
        k = int(angle // 90.0) % 4
        rotated = np.ascontiguousarray(np.rot90(bands, k=k, axes=(0, 1)))
    else:
        rotated = kernels.rotate_bilinear(np.ascontiguousarray(bands), angle)
    return rotated, (wd - angle) % 360.0


@dataclass
class SplitAssignment:
    """Per-site role plus per-sample labels for training-role sites."""

    site_roles: dict      # site_id -> "train" | "val_site" | "test_site"
    sample_labels: dict   # site_id -> int8 array (training sites only)
    seed: int

    def sites_with_role(self, role):
        return sorted(sid for sid, r in self.site_roles.items() if r == role)

    def mask(self, site_id, label):
        return self.sample_labels[site_id] == label


def _site_hash_even(site_id):
    return int(hashlib.md5(site_id.encode()).hexdigest(), 16) % 2 == 0


def assign_splits(sites, seed):
    """Site-level withholding plus sample-level validation splits.

    For every ecosystem group with at least 10 sites, floor(0.4 n) sites
    are withheld and split evenly into val_site/test_site (an odd
    remainder goes to val_site). On the remaining training sites, the
    final calendar year of any multi-year site becomes val_future or
    test_future (by site-id hash parity), and 20% of the remaining
    samples are flagged val. Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    roles = {s.site_id: "train" for s in sites}
    groups = {}
    for s in sites:
        groups.setdefault(s.ecosystem, []).append(s.site_id)
    for eco in sorted(groups):
        ids = sorted(groups[eco])
        if len(ids) < 10:
            continue
        k = int(0.4 * len(ids))
        withheld = [ids[i] for i in rng.permutation(len(ids))[:k]]
        n_val = (k + 1) // 2
        for sid in withheld[:n_val]:
            roles[sid] = "val_site"
        for sid in withheld[n_val:]:
            roles[sid] = "test_site"

    labels = {}
    pool = []  # (site_id, sample index) of still-trainable samples
    for s in sites:
        if roles[s.site_id] != "train":
            continue
        lab = np.zeros(s.n_samples, dtype=np.int8)
        years = s.samples["timestamp"].dt.year.to_numpy()
        if len(np.unique(years)) > 1:
            final = years == years.max()
            lab[final] = VAL_FUTURE if _site_hash_even(s.site_id) else TEST_FUTURE
        labels[s.site_id] = lab
        for i in np.flatnonzero(lab == TRAIN):
            pool.append((s.site_id, i))

    n_val_samples = round(0.2 * len(pool))
    for j in rng.choice(len(pool), size=n_val_samples, replace=False):
        sid, i = pool[j]
        labels[sid][i] = VAL
    return SplitAssignment(roles, labels, int(seed))

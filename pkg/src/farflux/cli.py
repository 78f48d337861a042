"""Command-line entry point.

Subcommands: gen-synth, train, eval, footprint-report, upscale. Every
command is driven by one JSON config (see config.py); flags carry only
the config path and verbosity. Exit codes: 0 success, 1 usage/config
error, 2 data error, 3 numeric failure. Failures print a one-line JSON
object to stdout; progress goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evaluation, features, footprint, model as far_model
from . import prep, synth, training, upscale as upscale_mod
from .dataset import load_dataset, save_dataset
from .errors import ConfigError, DataError, FarError, NumericError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _load_clean_split(dataset_dir, split_seed, log):
    ds = load_dataset(dataset_dir)
    ds, reports = prep.clean_dataset(ds)
    total = sum(r["input"] - r["kept"] for r in reports.values())
    print(f"cleaned {len(ds.sites)} sites, dropped {total} samples",
          file=log)
    splits = prep.assign_splits(ds.sites, split_seed)
    return ds, splits, reports


def cmd_gen_synth(doc, log):
    sec = cfgmod.section(doc, "synth")
    cfg = synth.SynthConfig(
        n_sites=sec["sites"], days=sec["days"], start=sec["start"],
        grid_dims=tuple(sec["grid"]), pixel_size_m=float(sec["pixel_size_m"]),
        types_per_site=sec["types_per_site"],
        ecosystems=tuple(sec["ecosystems"]),
        noise_rel=float(sec["noise_rel"]),
        band_noise=float(sec["band_noise"]),
        cloud_fraction=float(sec["cloud_fraction"]),
        height_range=tuple(sec["height_range"]),
        plume=footprint.PlumeParams(**sec["plume"]))
    print(f"generating {cfg.n_sites} sites x {cfg.days} days on "
          f"{cfg.grid_dims[0]}x{cfg.grid_dims[1]}", file=log)
    ds, gt = synth.generate_synthetic(cfg, sec["seed"])
    save_dataset(ds, sec["out_dir"])
    synth.save_ground_truth(gt, sec["truth_dir"])
    cfgmod.write_run_meta(sec["out_dir"], "gen-synth", doc,
                          {"seed": sec["seed"]})
    print(f"dataset -> {sec['out_dir']}, ground truth -> {sec['truth_dir']}",
          file=log)
    return 0


def _train_config(sec):
    return training.TrainConfig(
        lam=float(sec["lambda"]), entropy_sign=sec["entropy_sign"],
        learning_rate=float(sec["learning_rate"]),
        batch_size=sec["batch_size"], max_epochs=sec["max_epochs"],
        patience=sec["patience"], seed=sec["seed"], augment=sec["augment"],
        augment_right_angles=sec["augment_right_angles"],
        hidden_width=sec["hidden_width"], hidden_layers=sec["hidden_layers"],
        samples_per_epoch=sec["samples_per_epoch"],
        eval_sample_cap=sec["eval_sample_cap"])


def cmd_train(doc, log):
    sec = cfgmod.section(doc, "train")
    ds, splits, _ = _load_clean_split(sec["dataset_dir"], sec["split_seed"],
                                      log)
    cfg = _train_config(sec)
    model, tlog = training.train(ds, splits, cfg, log_stream=log)
    Path(sec["checkpoint"]).parent.mkdir(parents=True, exist_ok=True)
    far_model.save_checkpoint(sec["checkpoint"], model)
    if sec["log_csv"]:
        tlog.to_csv(sec["log_csv"])
    print(f"checkpoint -> {sec['checkpoint']} "
          f"(best epoch {tlog.best_epoch})", file=log)
    base = sec["baseline"]
    if base and base["enabled"]:
        bmodel, blog = training.train_baseline(ds, splits, cfg,
                                               norm=model.norm,
                                               log_stream=log)
        evaluation.save_baseline_checkpoint(base["checkpoint"], bmodel)
        if base.get("log_csv"):
            blog.to_csv(base["log_csv"])
        print(f"baseline checkpoint -> {base['checkpoint']}", file=log)
    cfgmod.write_run_meta(Path(sec["checkpoint"]).parent, "train", doc,
                          {"seed": sec["seed"],
                           "split_seed": sec["split_seed"]})
    return 0


def cmd_eval(doc, log):
    sec = cfgmod.section(doc, "eval")
    ds, splits, clean_reports = _load_clean_split(sec["dataset_dir"],
                                                  sec["split_seed"], log)
    far = far_model.load_checkpoint(sec["checkpoint"])
    baseline = None
    if sec["baseline_checkpoint"]:
        baseline = evaluation.load_baseline_checkpoint(
            sec["baseline_checkpoint"])
    truth = synth.load_ground_truth(sec["truth_dir"]) \
        if sec["truth_dir"] else None
    report, tables = evaluation.build_metric_report(
        ds, splits, far, baseline=baseline, truth=truth,
        eval_roles=tuple(sec["eval_roles"]),
        pixel_truth_cap=sec["pixel_truth_cap"],
        importance_features=sec["importance_features"],
        importance_cap=sec["importance_cap"], seed=sec["seed"])
    report["cleaning"] = clean_reports
    evaluation.write_report(report, tables, sec["out_dir"])
    cfgmod.write_run_meta(sec["out_dir"], "eval", doc,
                          {"seed": sec["seed"],
                           "split_seed": sec["split_seed"]})
    for freq, models in report["frequencies"].items():
        for name, m in models.items():
            print(f"{freq:10s} {name:9s} r2={m['r2']} rmse={m['rmse']}",
                  file=log)
    return 0


def cmd_footprint_report(doc, log):
    sec = cfgmod.section(doc, "footprint")
    ds, splits, _ = _load_clean_split(sec["dataset_dir"], sec["split_seed"],
                                      log)
    far = far_model.load_checkpoint(sec["checkpoint"])
    predictor = footprint.FarFootprintPredictor(far)
    out = Path(sec["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    bundles = features.build_bundles(ds, far.norm, splits)
    eval_sites = (splits.sites_with_role("val_site")
                  + splits.sites_with_role("test_site")) \
        or sorted(bundles)
    rng = np.random.default_rng([sec["seed"], 3])
    fp_rows = np.concatenate([bundles[s].fp_raw for s in eval_sites])
    if fp_rows.shape[0] > sec["sample_cap"]:
        fp_rows = fp_rows[np.sort(rng.choice(fp_rows.shape[0],
                                             sec["sample_cap"],
                                             replace=False))]

    table = footprint.centroid_vs_wind(predictor, fp_rows, bins=sec["bins"])
    table.to_csv(out / "centroid_vs_wind.csv", index=False)

    pixel_area = far.pixel_size_m ** 2
    areas = np.empty(fp_rows.shape[0])
    ents = np.empty(fp_rows.shape[0])
    upwind = np.empty(fp_rows.shape[0], dtype=bool)
    for i, row in enumerate(fp_rows):
        fp = predictor.predict_footprint(row)
        areas[i], _ = footprint.footprint_area(fp, pixel_area)
        ents[i] = far_model.entropy(fp)
        cent = footprint.footprint_centroid(fp)
        upwind[i] = footprint.centroid_is_upwind(cent, row[0], far.grid_dims,
                                                 far.tower_rc)
    summary = {
        "n_samples": int(fp_rows.shape[0]),
        "area_m2": {"mean": float(areas.mean()),
                    "median": float(np.median(areas)),
                    "min": float(areas.min()), "max": float(areas.max())},
        "entropy": {"mean": float(ents.mean())},
        "upwind_fraction": float(upwind.mean()),
        "lambda": far.lam,
    }
    (out / "footprint_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True))

    reference = fp_rows[int(rng.integers(fp_rows.shape[0]))]
    for scan in sec["scans"]:
        values = np.linspace(scan["min"], scan["max"], scan["points"])
        col = footprint.SCANNABLE[scan["variable"]] \
            if scan["variable"] in footprint.SCANNABLE else None
        if col is None:
            raise ConfigError(f"cannot scan {scan['variable']!r}")
        curve = footprint.scan_area(predictor, reference, scan["variable"],
                                    values,
                                    dataset_values=fp_rows[:, col])
        curve.to_frame().to_csv(out / f"scan_{scan['variable']}.csv",
                                index=False)
        curve.hist_frame().to_csv(out / f"hist_{scan['variable']}.csv",
                                  index=False)
    cfgmod.write_run_meta(out, "footprint-report", doc,
                          {"seed": sec["seed"],
                           "split_seed": sec["split_seed"]})
    print(f"footprint diagnostics -> {out}", file=log)
    return 0


def cmd_upscale(doc, log):
    sec = cfgmod.section(doc, "upscale")
    region = upscale_mod.load_region(sec["region_dir"])
    far = far_model.load_checkpoint(sec["checkpoint"])
    indices = None
    if sec["time_range"]:
        if len(sec["time_range"]) != 2:
            raise ConfigError("upscale.time_range must be [start, end]")
        t0 = np.datetime64(sec["time_range"][0], "s")
        t1 = np.datetime64(sec["time_range"][1], "s")
        indices = [i for i, t in enumerate(region.timestamps)
                   if t0 <= t <= t1]
        if not indices:
            raise DataError("time_range selects no timesteps")
    fluxes, masks, ts = [], [], []
    for t, flux, valid in upscale_mod.upscale_region(
            far, region, time_indices=indices, tile_rows=sec["tile_rows"]):
        fluxes.append(flux)
        masks.append(valid)
        ts.append(region.timestamps[t])
        print(f"upscaled {region.timestamps[t]}", file=log)
    out = Path(sec["out_dir"])
    upscale_mod.write_rasters(out, np.array(ts, dtype="datetime64[s]"),
                              np.stack(fluxes), np.stack(masks))
    mean, count = upscale_mod.temporal_mean_map(np.stack(fluxes),
                                                np.stack(masks))
    (out / "temporal_mean.bin").write_bytes(
        np.ascontiguousarray(mean, dtype="<f4").tobytes())
    series = upscale_mod.spatial_mean_series(np.stack(fluxes),
                                             np.stack(masks), ts)
    series.to_csv(out / "spatial_mean.csv", index=False)
    cfgmod.write_run_meta(out, "upscale", doc, {})
    print(f"rasters -> {out}", file=log)
    return 0


_COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "footprint-report": cmd_footprint_report,
    "upscale": cmd_upscale,
}


def main(argv=None):
    parser = _Parser(prog="farflux",
                     description="footprint-aware flux regression toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--quiet", action="store_true",
                       help="suppress progress output")
    try:
        args = parser.parse_args(argv)
        doc = cfgmod.load_config(args.config)
        log = open("/dev/null", "w") if args.quiet else sys.stderr
        try:
            return _COMMANDS[args.command](doc, log)
        finally:
            if args.quiet:
                log.close()
    except ConfigError as exc:
        _fail("config", str(exc))
        return 1
    except NumericError as exc:
        _fail("numeric", str(exc))
        return 3
    except DataError as exc:
        _fail("data", str(exc))
        return 2
    except FarError as exc:
        _fail("error", str(exc))
        return 1
    except FileNotFoundError as exc:
        _fail("data", str(exc))
        return 2


def _fail(kind, message):
    print(json.dumps({"error": {"type": kind, "message": message}}))


if __name__ == "__main__":
    sys.exit(main())

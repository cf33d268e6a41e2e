"""Command-line interface.

Subcommands: simulate, fit, predict, compare, show-defaults. The environment
variable SPB_THREADS caps the native-library (BLAS) thread count for the
whole run.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import config as cfg
from . import predictors
from .data_model import (DatasetError, SimulationConfig, SpatialDataset,
                         TrendSpec, load_csv, save_csv, simulate,
                         split_holdout)
from .evaluation import RasterSpec, compare

_THREAD_LIMITER = None


def _apply_thread_limit():
    global _THREAD_LIMITER
    raw = os.environ.get("SPB_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise SystemExit(f"SPB_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    _THREAD_LIMITER = threadpool_limits(limits=n)


def _outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _load_user_config(path: str | None) -> dict:
    if path is None:
        return cfg.defaults()
    return cfg.load_config(path)


def _trend_from(settings: dict) -> TrendSpec:
    return TrendSpec(tuple(settings["trend"]["covariates"]))


def _parse_methods(text: str | None, settings: dict) -> list:
    if text is None:
        return list(settings["methods"])
    tags = [t.strip() for t in text.split(",") if t.strip()]
    if not tags:
        raise SystemExit("--method got an empty tag list")
    return tags


def _load_points(path) -> tuple[np.ndarray, np.ndarray]:
    """Read prediction locations (lon, lat columns; others ignored)."""
    lons, lats = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"lon", "lat"} <= set(reader.fieldnames):
            raise DatasetError(f"{path}: need columns lon, lat")
        row_no = 1
        for row in reader:
            row_no += 1
            try:
                lons.append(float(row["lon"]))
                lats.append(float(row["lat"]))
            except (TypeError, ValueError):
                raise DatasetError(f"{path}: malformed row {row_no}") from None
    if not lons:
        raise DatasetError(f"{path}: empty file")
    return np.asarray(lons), np.asarray(lats)


# -- subcommands --------------------------------------------------------------

def _cmd_simulate(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    sim_cfg = SimulationConfig.from_dict(doc)
    if args.seed is not None:
        doc["seed"] = args.seed
        sim_cfg = SimulationConfig.from_dict(doc)
    data = simulate(sim_cfg)
    out = _outdir(args.out)
    save_csv(data, os.path.join(out, "data.csv"))
    written = ["data.csv"]
    if args.split_fraction is not None:
        split = split_holdout(data, args.split_fraction, sim_cfg.seed)
        save_csv(split.train, os.path.join(out, "train.csv"))
        save_csv(split.validation, os.path.join(out, "validation.csv"))
        written += ["train.csv", "validation.csv"]
    print(f"simulated {data.n} points (seed {sim_cfg.seed}) -> "
          + ", ".join(os.path.join(out, w) for w in written))
    return 0


def _cmd_fit(args) -> int:
    settings = _load_user_config(args.config)
    methods = _parse_methods(args.method, settings)
    train = load_csv(args.data)
    trend = _trend_from(settings)
    seed = args.seed if args.seed is not None else settings["seed"]
    out = _outdir(args.out)
    for tag in methods:
        opts = settings.get(tag)
        model = predictors.fit(tag, train, trend=trend,
                               sigma_eps_sq=settings["sigma_eps_sq"],
                               options=opts, seed=seed)
        path = os.path.join(out, f"model_{tag}.json")
        model.save(path)
        print(f"{tag}: fitted on {train.n} points -> {path}")
        print(f"  params: {json.dumps(model.params_summary())}")
    return 0


def _cmd_predict(args) -> int:
    model = predictors.load(args.model)
    if args.raster is not None:
        lons, lats = RasterSpec.parse(args.raster).points()
    elif args.points is not None:
        lons, lats = _load_points(args.points)
    else:
        raise SystemExit("predict needs a POINTS.csv argument or --raster")
    result = model.predict(lons, lats)
    out = _outdir(args.out)
    path = os.path.join(out, "predictions.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["lon", "lat", "mean"]
        if result.has_variance:
            header.append("variance")
        writer.writerow(header)
        for i in range(lons.size):
            row = [repr(float(lons[i])), repr(float(lats[i])),
                   repr(float(result.mean[i]))]
            if result.has_variance:
                row.append(repr(float(result.variance[i])))
            writer.writerow(row)
    print(f"{model.tag}: predicted {lons.size} locations -> {path}")
    return 0


def _cmd_compare(args) -> int:
    settings = _load_user_config(args.config)
    methods = _parse_methods(args.method, settings)
    data = load_csv(args.data)
    seed = args.seed if args.seed is not None else settings["seed"]
    fraction = (args.split_fraction if args.split_fraction is not None
                else settings["split_fraction"])
    pmcc_sign = (args.pmcc_sign if args.pmcc_sign is not None
                 else settings["pmcc_sign"])
    split = split_holdout(data, fraction, seed)
    raster = None
    if args.raster is not None:
        raster = RasterSpec.parse(args.raster)
    report = compare(split, methods, raster, trend=_trend_from(settings),
                     sigma_eps_sq=settings["sigma_eps_sq"],
                     method_options={t: settings.get(t) for t in methods},
                     pmcc_sign=pmcc_sign, seed=seed,
                     raster_step=settings["raster_step"])
    table = report.to_csv()
    sys.stdout.write(table)
    if args.out is not None:
        out = _outdir(args.out)
        with open(os.path.join(out, "compare.csv"), "w") as fh:
            fh.write(table)
        with open(os.path.join(out, "compare.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        print(f"wrote {os.path.join(out, 'compare.csv')} and compare.json")
    return 0


def _cmd_show_defaults(args) -> int:
    json.dump(cfg.defaults(), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatialbench",
        description="Spatial prediction toolkit and hold-out benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="draw a synthetic dataset")
    p_sim.add_argument("--config", required=True,
                       help="JSON simulation settings (domain, n_points, "
                            "beta, sigma0_sq, theta, sigma_xi_sq, "
                            "sigma_eps_sq, seed)")
    p_sim.add_argument("--seed", type=int, default=None,
                       help="override the seed in the config")
    p_sim.add_argument("--split-fraction", type=float, default=None,
                       help="also write train.csv/validation.csv at this "
                            "hold-out fraction")
    p_sim.add_argument("--out", default=".", help="output directory")
    p_sim.set_defaults(func=_cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit methods on a training CSV")
    p_fit.add_argument("data", help="training CSV (lon,lat,value[,weight])")
    p_fit.add_argument("--config", default=None, help="JSON settings overlay")
    p_fit.add_argument("--method", default=None,
                       help="comma-separated tags (default: all methods)")
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--out", default=".", help="output directory")
    p_fit.set_defaults(func=_cmd_fit)

    p_pred = sub.add_parser("predict", help="predict from a saved model")
    p_pred.add_argument("model", help="fitted-model JSON from `fit`")
    p_pred.add_argument("points", nargs="?", default=None,
                        help="CSV of prediction locations (lon,lat)")
    p_pred.add_argument("--raster", default=None,
                        help="'lon0,lat0,lon1,lat1,step' instead of a "
                             "points file")
    p_pred.add_argument("--out", default=".", help="output directory")
    p_pred.set_defaults(func=_cmd_predict)

    p_cmp = sub.add_parser("compare",
                           help="hold-out benchmark over several methods")
    p_cmp.add_argument("data", help="full dataset CSV to split and score")
    p_cmp.add_argument("--config", default=None, help="JSON settings overlay")
    p_cmp.add_argument("--method", default=None,
                       help="comma-separated tags (default: all methods)")
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--split-fraction", type=float, default=None)
    p_cmp.add_argument("--raster", default=None,
                       help="'lon0,lat0,lon1,lat1,step' semivariogram raster")
    p_cmp.add_argument("--pmcc-sign", choices=("paper", "score"), default=None)
    p_cmp.add_argument("--out", default=None,
                       help="directory for compare.csv / compare.json")
    p_cmp.set_defaults(func=_cmd_compare)

    p_def = sub.add_parser("show-defaults",
                           help="print the full default settings as JSON")
    p_def.set_defaults(func=_cmd_show_defaults)
    return parser


def main(argv=None) -> int:
    _apply_thread_limit()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

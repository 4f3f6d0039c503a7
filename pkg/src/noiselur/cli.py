"""Command line pipeline driver.

Seven subcommands walk the full chain: synth -> features -> train ->
evaluate -> explain -> predict-grid -> exposure.  Each one verifies the
manifests of whatever it consumes, so edits to upstream files force a
re-run instead of silently mixing stale artifacts.

Exit codes: 0 success, 1 validation error (bad config, missing or stale
files, contract violations), 2 unexpected runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ENV_OUTPUT_DIR, ENV_THREADS, RunConfig
from .explain import (beeswarm_data, dependence_data, importance_ranking,
                      tree_shap, write_records_csv)
from .features import PredictorMatrix, build_predictor_matrix
from .geodata import load_raster, load_sites, load_vector_layer
from .manifest import (check_upstream, digest_of, file_sha256, hash_files,
                       load_manifest, output_path, write_manifest)
from .mapping import NoiseGrid, export_grid, exposure_table, make_grid, \
    predict_grid
from .models import ModelSpec, TrainedModel, fit_model
from .rng import derive_seed
from .spatialstats import inverse_distance_weights, morans_i, \
    permutation_test
from .synth import generate_dataset
from .validation import CVReport, make_fold_plan, nested_cv

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

# seed tags owned by the driver
_TAG_FINAL_FIT = 104
_TAG_MORAN = 105

_LAYER_KINDS = {"roads": "polyline", "railways": "polyline",
                "airports": "polygon", "landuse": "polygon",
                "buildings": "point"}


class UsageError(ValueError):
    """Bad command line or config; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# shared plumbing

def _load_config(args):
    if not args.config:
        raise UsageError("--config is required for this command")
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = int(args.seed)
    cfg.validate_paths()
    return cfg


def _threads(cfg, args):
    return cfg.resolved_threads(getattr(args, "threads", None))


def _command_out_dir(cfg, args, command):
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        out = cfg.resolved_output_dir() / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_digest(cfg):
    return digest_of(cfg.to_dict())


def _city_input_paths(cfg, keys):
    paths = {"sites": cfg.sites_path()}
    for city in sorted(cfg.cities):
        for key in keys:
            paths[f"{city}/{key}"] = cfg.city_layer_path(city, key)
    return paths


def _load_city_layers(cfg, city, keys):
    layers = {}
    for key in keys:
        p = cfg.city_layer_path(city, key)
        if key == "imperviousness":
            layers[key] = load_raster(p, declared="imperviousness")
        elif key == "population":
            layers[key] = load_raster(p)
        else:
            layers[key] = load_vector_layer(p, _LAYER_KINDS.get(key,
                                                                "polygon"))
    return layers


def _feature_layer_keys(specs):
    return tuple(sorted({s.layer for s in specs if s.layer is not None}))


def _load_features(cfg):
    """Matrix, targets and cities from the features stage, order-checked."""
    features_dir = cfg.resolved_output_dir() / "features"
    man = load_manifest(features_dir)
    check_upstream(man, what="features artifact")
    matrix = PredictorMatrix.load_cache(
        output_path(man, "features.npz"),
        expected_key=man["extra"]["cache_key"])
    site_ids, cities, y = [], [], []
    with open(output_path(man, "targets.csv"), newline="",
              encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            site_ids.append(row["site_id"])
            cities.append(row["city"])
            y.append(float(row["laeq"]))
    if tuple(site_ids) != matrix.row_ids:
        raise ValueError("targets.csv row order does not match the "
                         "feature matrix; re-run 'features'")
    return man, matrix, np.array(y), np.array(cities)


def _load_model(cfg):
    train_dir = cfg.resolved_output_dir() / "train"
    man = load_manifest(train_dir)
    check_upstream(man, what="train artifact")
    model = TrainedModel.load(output_path(man, "model.json"))
    return man, model


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    if args.seed is None:
        raise UsageError("synth requires --seed")
    if not args.out:
        raise UsageError("synth requires --out")
    written = generate_dataset(int(args.seed), args.out,
                               n_sites=args.sites,
                               city_count=args.cities,
                               force=args.force)
    out_dir = Path(args.out)
    files = {"sites": written["sites"], "config": written["config"]}
    for city, layers in written.items():
        if isinstance(layers, dict):
            for key, rel in layers.items():
                files[f"{city}/{key}"] = out_dir / rel
    write_manifest(out_dir, command="synth", seed=int(args.seed),
                   config_digest=digest_of({
                       "seed": int(args.seed), "n_sites": args.sites,
                       "city_count": args.cities}),
                   inputs={}, output_paths=files)
    print(f"dataset written to {out_dir} "
          f"({args.sites} sites, {args.cities} cities)")
    return EXIT_OK


def cmd_features(args):
    cfg = _load_config(args)
    threads = _threads(cfg, args)
    out = _command_out_dir(cfg, args, "features")
    specs = cfg.predictor_specs()
    keys = _feature_layer_keys(specs)
    inputs = hash_files(_city_input_paths(cfg, keys))

    sites = load_sites(cfg.sites_path())
    if not sites:
        raise ValueError("sites file holds no usable rows")
    order = {s.site_id: i for i, s in enumerate(sites)}
    blocks = {}
    for city in sorted({s.city for s in sites}):
        if city not in cfg.cities:
            raise ValueError(f"sites file names city {city!r} but the "
                             "config lists no layers for it")
        layers = _load_city_layers(cfg, city, keys)
        locs = [(s.site_id, s.x, s.y) for s in sites if s.city == city]
        blocks[city] = build_predictor_matrix(
            locs, specs, layers, censor_ceiling=cfg.censor_ceiling,
            threads=threads)

    # reassemble rows in sites.csv order
    parts = sorted(
        ((rid, city, blocks[city].values[i])
         for city, m in blocks.items()
         for i, rid in enumerate(m.row_ids)),
        key=lambda t: order[t[0]])
    any_block = next(iter(blocks.values()))
    censored = {}
    for m in blocks.values():
        censored.update(m.censored)
    matrix = PredictorMatrix(
        row_ids=tuple(t[0] for t in parts),
        column_names=any_block.column_names,
        values=np.vstack([t[2] for t in parts]),
        units=any_block.units,
        censored=censored)

    cache_key = digest_of({"config": _config_digest(cfg),
                           "stage": "features"})
    npz = out / "features.npz"
    matrix.save_cache(npz, key=cache_key)
    matrix.to_csv(out / "features.csv")
    with open(out / "targets.csv", "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "city", "laeq"])
        by_id = {s.site_id: s for s in sites}
        for rid in matrix.row_ids:
            s = by_id[rid]
            w.writerow([s.site_id, s.city, repr(s.mean_laeq)])
    write_manifest(out, command="features", seed=cfg.seed,
                   config_digest=_config_digest(cfg), inputs=inputs,
                   output_paths={"features.npz": npz,
                                 "features.csv": out / "features.csv",
                                 "targets.csv": out / "targets.csv"},
                   extra={"cache_key": cache_key,
                          "n_sites": len(matrix.row_ids),
                          "n_predictors": len(matrix.column_names)})
    print(f"features: {len(matrix.row_ids)} sites x "
          f"{len(matrix.column_names)} predictors -> {out}")
    return EXIT_OK


def _modal_hyperparameters(report, label):
    """The hyperparameter setting picked most often across outer folds."""
    counts = {}
    for m in report.fold_metrics:
        if m["label"] != label:
            continue
        key = json.dumps(m["hyperparameters"], sort_keys=True)
        counts[key] = counts.get(key, 0) + 1
    best = max(counts.items(), key=lambda kv: (kv[1], kv[0]))
    return json.loads(best[0])


def cmd_train(args):
    cfg = _load_config(args)
    threads = _threads(cfg, args)
    out = _command_out_dir(cfg, args, "train")
    feat_man, matrix, y, cities = _load_features(cfg)
    inputs = {name: dict(feat_man["outputs"][name])
              for name in ("features.npz", "targets.csv")}

    plan = make_fold_plan(len(y), cfg.seed, **cfg.cv)
    report = nested_cv(matrix.values, matrix.column_names, y, cities,
                       cfg.family_list(), cfg.grids, plan,
                       threads=threads)
    report.save(out)

    if report.comparison:
        winner = report.comparison["winner"]
    else:
        winner = report.labels[0]
    family = dict(zip(report.labels, report.families))[winner]
    hp = _modal_hyperparameters(report, winner)
    final = fit_model(
        ModelSpec(family, hp, seed=derive_seed(cfg.seed, _TAG_FINAL_FIT)),
        matrix.values, matrix.column_names, y)
    final.save(out / "model.json")

    write_manifest(out, command="train", seed=cfg.seed,
                   config_digest=_config_digest(cfg), inputs=inputs,
                   output_paths={
                       "cv_report.json": out / "cv_report.json",
                       "fold_metrics.csv": out / "fold_metrics.csv",
                       "pairwise_tests.csv": out / "pairwise_tests.csv",
                       "boxplot_data.csv": out / "boxplot_data.csv",
                       "model.json": out / "model.json"},
                   extra={"winner": winner, "family": family,
                          "hyperparameters": hp})
    lines = [f"{lab}: rmse {report.summary[lab]['mean_rmse']:.3f} "
             f"r2 {report.summary[lab]['mean_r2']}"
             for lab in report.labels]
    print("nested CV done; " + "; ".join(lines))
    print(f"winner {winner} ({family}) refit on all rows -> {out}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _load_config(args)
    out = _command_out_dir(cfg, args, "evaluate")
    train_man, model = _load_model(cfg)
    _, matrix, y, cities = _load_features(cfg)
    with open(output_path(train_man, "cv_report.json"),
              encoding="utf-8") as fh:
        report = CVReport.from_dict(json.load(fh))
    inputs = {name: dict(train_man["outputs"][name])
              for name in ("cv_report.json", "model.json")}

    sites = load_sites(cfg.sites_path())
    coords = {s.site_id: (s.x, s.y) for s in sites}
    resid = y - model.predict(matrix.values, matrix.column_names)
    moran = {}
    for k, city in enumerate(sorted(set(cities))):
        sel = cities == city
        pts = np.array([coords[r] for r, m in zip(matrix.row_ids, sel)
                        if m])
        w = inverse_distance_weights(pts)
        moran[city] = permutation_test(
            resid[sel], w, n_perm=999,
            seed=derive_seed(cfg.seed, _TAG_MORAN, k))

    doc = {
        "format": "noiselur-evaluation",
        "version": 1,
        "summary": report.summary,
        "comparison": report.comparison or None,
        "residual_moran": moran,
        "in_sample_residual_sd": float(resid.std()),
    }
    with open(out / "evaluation.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, allow_nan=False)
    write_records_csv(report.per_city, out / "per_city_metrics.csv",
                      ["label", "city", "repeat", "fold", "n", "rmse",
                       "mae"])
    write_manifest(out, command="evaluate", seed=cfg.seed,
                   config_digest=_config_digest(cfg), inputs=inputs,
                   output_paths={
                       "evaluation.json": out / "evaluation.json",
                       "per_city_metrics.csv": out / "per_city_metrics.csv"})
    worst = max(moran.values(), key=lambda m: m["i"])
    print(f"evaluation written; max residual Moran's I "
          f"{worst['i']:.4f} (two-sided p {worst['p_two_sided']:.3f})")
    return EXIT_OK


def cmd_explain(args):
    cfg = _load_config(args)
    out = _command_out_dir(cfg, args, "explain")
    train_man, model = _load_model(cfg)
    _, matrix, y, cities = _load_features(cfg)
    inputs = {"model.json": dict(train_man["outputs"]["model.json"])}

    shap = tree_shap(model, matrix.values, matrix.column_names,
                     row_ids=matrix.row_ids, cities=cities)
    shap.to_csv(out / "shap.csv")
    with open(out / "shap_meta.json", "w", encoding="utf-8") as fh:
        json.dump(shap.meta_dict(), fh, indent=1, allow_nan=False)

    ranking = importance_ranking(shap, group_by="city")
    rows = []
    for rec in ranking:
        row = {"rank": rec["rank"], "feature": rec["feature"],
               "mean_abs_shap": rec["mean_abs_shap"]}
        for city, v in rec["per_city"].items():
            row[f"{city}_mean_abs_shap"] = v
        rows.append(row)
    write_records_csv(rows, out / "importance.csv", list(rows[0]))
    write_records_csv(beeswarm_data(shap), out / "beeswarm.csv",
                      ["row_id", "city", "feature", "shap",
                       "normalized_value"])
    top = ranking[0]["feature"]
    write_records_csv(dependence_data(shap, top),
                      out / f"dependence_{top}.csv",
                      ["value", "shap", "row_id", "city"])
    write_manifest(out, command="explain", seed=cfg.seed,
                   config_digest=_config_digest(cfg), inputs=inputs,
                   output_paths={
                       "shap.csv": out / "shap.csv",
                       "shap_meta.json": out / "shap_meta.json",
                       "importance.csv": out / "importance.csv",
                       "beeswarm.csv": out / "beeswarm.csv",
                       f"dependence_{top}.csv":
                           out / f"dependence_{top}.csv"},
                   extra={"top_feature": top})
    print(f"attributions for {len(shap.row_ids)} sites; "
          f"top predictor {top}")
    return EXIT_OK


def cmd_predict_grid(args):
    cfg = _load_config(args)
    threads = _threads(cfg, args)
    out = _command_out_dir(cfg, args, "grids")
    train_man, model = _load_model(cfg)
    specs = cfg.predictor_specs()
    keys = _feature_layer_keys(specs) + ("boundary",)
    inputs = {"model.json": dict(train_man["outputs"]["model.json"])}
    inputs.update(hash_files(_city_input_paths(cfg, keys)))

    outputs = {}
    summaries = {}
    for city in sorted(cfg.cities):
        layers = _load_city_layers(cfg, city, keys)
        boundary = layers.pop("boundary")
        grid = make_grid(boundary, cell=cfg.cell_size, city=city)
        surface = predict_grid(model, grid, layers, specs,
                               threads=threads)
        asc = out / f"surface_{city}.asc"
        gj = out / f"surface_{city}.geojson"
        export_grid(surface, asc, fmt="ascii")
        export_grid(surface, gj, fmt="geojson")
        outputs[asc.name] = asc
        outputs[gj.name] = gj
        active = surface.mask & np.isfinite(surface.values)
        summaries[city] = {
            "cells": int(surface.mask.size),
            "predicted": int(active.sum()),
            "failed": len(surface.failures),
            "min_db": float(surface.values[active].min()),
            "max_db": float(surface.values[active].max()),
        }
    with open(out / "grids_summary.json", "w", encoding="utf-8") as fh:
        json.dump({"cell_size": cfg.cell_size, "cities": summaries}, fh,
                  indent=1, allow_nan=False)
    outputs["grids_summary.json"] = out / "grids_summary.json"
    write_manifest(out, command="predict-grid", seed=cfg.seed,
                   config_digest=_config_digest(cfg), inputs=inputs,
                   output_paths=outputs)
    total = sum(s["predicted"] for s in summaries.values())
    print(f"noise surfaces for {len(summaries)} cities "
          f"({total} predicted cells) -> {out}")
    return EXIT_OK


def cmd_exposure(args):
    cfg = _load_config(args)
    out = _command_out_dir(cfg, args, "exposure")
    grids_dir = cfg.resolved_output_dir() / "grids"
    grid_man = load_manifest(grids_dir)
    check_upstream(grid_man, what="grid artifact")
    pop_paths = {f"{city}/population":
                 cfg.city_layer_path(city, "population")
                 for city in sorted(cfg.cities)}
    inputs = hash_files(pop_paths)
    for name, entry in grid_man["outputs"].items():
        if name.endswith(".asc"):
            inputs[name] = dict(entry)

    grids, rasters = [], []
    for city in sorted(cfg.cities):
        layer = load_raster(output_path(grid_man, f"surface_{city}.asc"))
        values = layer.values
        grids.append(NoiseGrid(city=city, origin=layer.origin,
                               cell_size=layer.cell_size,
                               mask=np.isfinite(values), values=values))
        rasters.append(load_raster(cfg.city_layer_path(city,
                                                       "population")))
    table = exposure_table(grids, rasters, thresholds=cfg.thresholds)
    table.to_csv(out / "exposure.csv")
    table.to_json(out / "exposure.json")
    write_manifest(out, command="exposure", seed=cfg.seed,
                   config_digest=_config_digest(cfg), inputs=inputs,
                   output_paths={"exposure.csv": out / "exposure.csv",
                                 "exposure.json": out / "exposure.json"})
    k = min(3, len(table.thresholds) - 1)
    print(f"exposure over {table.total_population:.0f} residents; "
          f"{table.total_percentage(k):.1f}% above "
          f"{table.thresholds[k]:.0f} dB(A)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring

def build_parser():
    parser = _Parser(prog="noiselur",
                     description="Traffic-noise mapping pipeline")
    parser.add_argument("--version", action="version",
                        version=f"noiselur {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", help="path to the run config JSON")
        p.add_argument("--seed", type=int,
                       help="override the config seed")
        p.add_argument("--threads", type=int,
                       help=f"worker count (or ${ENV_THREADS}; default "
                            "logical cores)")
        p.add_argument("--force", action="store_true",
                       help="overwrite non-empty output directories")
        p.add_argument("--out",
                       help=f"output directory (or ${ENV_OUTPUT_DIR} "
                            "for the run root)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, needs_config=False)
    p.add_argument("--sites", type=int, default=232,
                   help="total monitoring sites (default 232)")
    p.add_argument("--cities", type=int, default=5,
                   help="number of cities (default 5)")
    p.set_defaults(func=cmd_synth)

    for name, func, desc in (
            ("features", cmd_features,
             "extract the predictor matrix at the sites"),
            ("train", cmd_train,
             "nested cross-validation and final model fit"),
            ("evaluate", cmd_evaluate,
             "model comparison and residual spatial diagnostics"),
            ("explain", cmd_explain,
             "per-site attribution of the trained model"),
            ("predict-grid", cmd_predict_grid,
             "predict noise surfaces on the city grids"),
            ("exposure", cmd_exposure,
             "population exposure by isophone band")):
        p = sub.add_parser(name, help=desc)
        common(p)
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception:  # pragma: no cover - defensive
        import traceback
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

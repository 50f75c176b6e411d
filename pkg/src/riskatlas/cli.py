"""Command-line pipeline driver.

Five subcommands share one JSON configuration:

    atlas train     fit the model, export the split and the range prior
    atlas calibrate choose the probability threshold on held-out data
    atlas map       rasterize indicators over the covariate stack grid
    atlas zonal     aggregate rasters over regions, rank, correlate
    atlas eval      score the model on the test split

All outputs land under the configured output directory with stable
names, carry the canonical config echo, and are byte-identical when
re-run with identical inputs. Exit codes: 0 success, 1 runtime
failure, 2 configuration or input validation failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import conformal, geoprior, indicators, split as splitmod, zonal as zonalmod
from ._kernels import BACKEND
from .config import ConfigError, canonical_echo, load_config, require_paths
from .domain import (
    DataError,
    SpeciesCatalog,
    load_occurrences,
    load_status_table,
)
from .grids import (
    KIND_REAL,
    KIND_STATUS,
    GridSpec,
    RegionRaster,
    load_feature_stack,
    load_region_catalog,
    read_ascii,
)
from .inference import (
    AsciiSink,
    batch_predict_map,
    indicator_kind,
    indicator_nodata,
    predict_point,
    validate_indicator_names,
)
from .model import (
    SoftmaxModel,
    TrainConfig,
    macro_top_k_accuracy_from_probs,
    top_k_accuracy_from_probs,
    train,
)

logger = logging.getLogger(__name__)

MODEL_FILE = "model.bin"
MODEL_FULL_FILE = "model_full.bin"
SPLIT_FILE = "split.csv"
PRIOR_FILE = "prior.csv"
METRICS_FILE = "train_metrics.csv"
CALIBRATION_JSON = "calibration.json"
CALIBRATION_TXT = "calibration.txt"
MAP_REPORT = "map_report.txt"
FILTER_REPORT = "filter_report.csv"
AREA_FILE = "zonal_area_pct.csv"
MEAN_FILE = "zonal_mean.csv"
RANK_FILE = "rankings.csv"
CORR_FILE = "correlation.txt"
PA_FILE = "pa_report.csv"
EVAL_FILE = "eval_metrics.csv"


def _out_dir(cfg):
    out = cfg["paths"]["out"]
    os.makedirs(out, exist_ok=True)
    return out


def _model_path(cfg):
    return cfg["paths"]["model"] or os.path.join(cfg["paths"]["out"], MODEL_FILE)


def _load_model(cfg):
    path = _model_path(cfg)
    if not os.path.exists(path):
        raise ConfigError(f"model file not found: {path} (run 'atlas train' first)")
    return SoftmaxModel.load(path)


def _load_split(cfg):
    path = os.path.join(cfg["paths"]["out"], SPLIT_FILE)
    if not os.path.exists(path):
        raise ConfigError(f"split file not found: {path} (run 'atlas train' first)")
    return splitmod.SplitAssignment.load(path, cfg["split"]["block_size"])


def _write_csv(path, header, rows, echo):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config: {echo}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value):
    if value is None:
        return "nan"
    return f"{value:.9g}"


def _model_labels(data, model):
    """Occurrence species ids mapped onto model output columns."""
    index = {name: i for i, name in enumerate(model.species_names)}
    missing = [n for n in data.catalog.names if n not in index]
    if missing:
        raise DataError(
            f"{len(missing)} occurrence species are unknown to the model, e.g. {missing[:3]}"
        )
    lut = np.array([index[n] for n in data.catalog.names], dtype=np.int64)
    return lut[data.species]


def _point_features(cfg, stack, data):
    """Features for occurrence points; non-finite rows are masked out."""
    feats = stack.features_at_points(data.lon, data.lat, patch_radius=cfg["patch_radius"])
    finite = np.isfinite(feats).all(axis=1)
    n_dropped = int((~finite).sum())
    if n_dropped:
        logger.warning("%d occurrence points have non-finite features; dropped", n_dropped)
    return feats, finite


def _train_config(cfg):
    t = cfg["train"]
    return TrainConfig(
        learning_rate=t["learning_rate"],
        decay_epochs=tuple(t["decay_epochs"]),
        decay_factor=t["decay_factor"],
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        seed=t["seed"],
        loss=t["loss"],
        margin=t["margin"],
        reweight_start_epoch=t["reweight_start_epoch"],
    )


def cmd_train(cfg):
    require_paths(cfg, "occurrences", "stack")
    out = _out_dir(cfg)
    echo = canonical_echo(cfg)
    data = load_occurrences(cfg["paths"]["occurrences"])
    if data.n == 0:
        raise DataError("occurrence file contains no rows")
    stack = load_feature_stack(cfg["paths"]["stack"])

    assignment = splitmod.split_blocks(
        data,
        block_size=cfg["split"]["block_size"],
        ratios=tuple(cfg["split"]["ratios"]),
        seed=cfg["split"]["seed"],
    )
    assignment, n_moved = splitmod.repair_orphans(assignment, data)
    assignment.save(os.path.join(out, SPLIT_FILE), header_comment=f"config: {echo}")
    n_train, n_val, n_test = assignment.counts()
    logger.info(
        "split blocks: %d train / %d validation / %d test (%d moved by orphan repair)",
        n_train, n_val, n_test, n_moved,
    )

    splits = assignment.occurrence_splits(data)
    feats, finite = _point_features(cfg, stack, data)
    train_mask = (splits == splitmod.TRAIN) & finite
    val_mask = (splits == splitmod.VALIDATION) & finite
    if not train_mask.any():
        raise DataError("training split is empty")
    val = (feats[val_mask], data.species[val_mask]) if val_mask.any() else None

    model, history = train(
        feats[train_mask],
        data.species[train_mask],
        data.n_species,
        _train_config(cfg),
        species_names=data.catalog.names,
        val=val,
        eval_top_k=cfg["train"]["eval_top_k"],
    )
    model.save(os.path.join(out, MODEL_FILE))
    _write_csv(
        os.path.join(out, METRICS_FILE),
        ["epoch", "learning_rate", "train_loss", "val_micro_topk", "val_macro_topk"],
        [
            [h["epoch"], _fmt(h["learning_rate"]), _fmt(h["train_loss"]),
             _fmt(h["val_micro_topk"]), _fmt(h["val_macro_topk"])]
            for h in history
        ],
        echo,
    )

    if cfg["train"]["retrain_full"]:
        full_model, _ = train(
            feats[finite],
            data.species[finite],
            data.n_species,
            _train_config(cfg),
            species_names=data.catalog.names,
        )
        full_model.save(os.path.join(out, MODEL_FULL_FILE))
        logger.info("full-data model written to %s", os.path.join(out, MODEL_FULL_FILE))

    prior = geoprior.build_continent_prior(data)
    prior.save(os.path.join(out, PRIOR_FILE))
    logger.info(
        "trained on %d points, final loss %.6f; model at %s",
        int(train_mask.sum()), history[-1]["train_loss"], os.path.join(out, MODEL_FILE),
    )
    return 0


def _calibration_inputs(cfg, split_name):
    data = load_occurrences(cfg["paths"]["occurrences"])
    stack = load_feature_stack(cfg["paths"]["stack"])
    model = _load_model(cfg)
    assignment = _load_split(cfg)
    splits = assignment.occurrence_splits(data)
    labels = _model_labels(data, model)
    feats, finite = _point_features(cfg, stack, data)
    code = splitmod.SPLIT_NAMES.index(split_name)
    mask = (splits == code) & finite
    if not mask.any():
        raise DataError(f"{split_name} split is empty")
    return model, feats[mask], labels[mask]


def cmd_calibrate(cfg):
    require_paths(cfg, "occurrences", "stack")
    out = _out_dir(cfg)
    echo = canonical_echo(cfg)
    model, feats, labels = _calibration_inputs(cfg, cfg["calibration_split"])
    probs = model.predict_proba_batch(feats)
    true_probs = probs[np.arange(labels.size), labels]
    result = conformal.calibrate(true_probs, cfg["epsilon"])
    sizes = conformal.set_sizes(probs, result.lam)
    result = result.with_set_sizes(conformal.SetSizeSummary.from_sizes(sizes))
    k = min(cfg["train"]["eval_top_k"], model.n_classes)
    micro = top_k_accuracy_from_probs(probs, labels, k)
    macro = macro_top_k_accuracy_from_probs(probs, labels, k)

    payload = {
        "lambda": result.lam,
        "epsilon": result.epsilon,
        "empirical_error": result.empirical_error,
        "n_calibration": result.n_calibration,
        "mean_set_size": result.mean_set_size,
        "set_sizes": {
            "mean": result.set_sizes.mean,
            "std": result.set_sizes.std,
            "min": result.set_sizes.min,
            "q25": result.set_sizes.q25,
            "median": result.set_sizes.median,
            "q75": result.set_sizes.q75,
            "max": result.set_sizes.max,
        },
        "top_k": k,
        "micro_topk": micro,
        "macro_topk": macro,
        "calibration_split": cfg["calibration_split"],
        "config": json.loads(echo),
    }
    with open(os.path.join(out, CALIBRATION_JSON), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")

    s = result.set_sizes
    lines = [
        f"# config: {echo}",
        f"threshold lambda      {result.lam:.9g}",
        f"error budget epsilon  {result.epsilon:.9g}",
        f"empirical error       {result.empirical_error:.9g}",
        f"calibration points    {result.n_calibration}",
        f"micro top-{k} accuracy  {micro:.4f}",
        f"macro top-{k} accuracy  {macro:.4f}",
        "set size summary (mean/std/min/q25/median/q75/max)",
        f"  {s.mean:.3f} / {s.std:.3f} / {s.min:g} / {s.q25:g} / {s.median:g} / {s.q75:g} / {s.max:g}",
    ]
    with open(os.path.join(out, CALIBRATION_TXT), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    logger.info("lambda=%.6g empirical_error=%.4f mean set size %.2f",
                result.lam, result.empirical_error, s.mean)
    return 0


def _resolve_lambda(cfg):
    if cfg["lambda"] is not None:
        return float(cfg["lambda"])
    path = os.path.join(cfg["paths"]["out"], CALIBRATION_JSON)
    if not os.path.exists(path):
        raise ConfigError(
            "lambda is not configured and calibration.json is missing; run 'atlas calibrate'"
        )
    with open(path, encoding="utf-8") as fh:
        return float(json.load(fh)["lambda"])


def _load_prior(cfg, catalog):
    path = cfg["paths"]["prior"] or os.path.join(cfg["paths"]["out"], PRIOR_FILE)
    if os.path.exists(path):
        return geoprior.ContinentPrior.load(path, catalog)
    require_paths(cfg, "occurrences")
    data = load_occurrences(cfg["paths"]["occurrences"])
    return geoprior.build_continent_prior(data).align(catalog)


def _map_grid(cfg, stack):
    g = cfg["grid"]
    if g["lon_range"] is None and g["lat_range"] is None:
        spec = stack.grid
    else:
        if g["lon_range"] is None or g["lat_range"] is None:
            raise ConfigError("grid.lon_range and grid.lat_range must be set together")
        spec = GridSpec(
            lon0=g["lon_range"][0], lon1=g["lon_range"][1],
            lat0=g["lat_range"][0], lat1=g["lat_range"][1],
            step=g["step"],
        )
    if g["drop_antimeridian"]:
        spec = spec.without_antimeridian()
    return spec


def cmd_map(cfg):
    require_paths(cfg, "stack", "statuses")
    out = _out_dir(cfg)
    echo = canonical_echo(cfg)
    model = _load_model(cfg)
    stack = load_feature_stack(cfg["paths"]["stack"])
    catalog = SpeciesCatalog(tuple(model.species_names))
    table = load_status_table(cfg["paths"]["statuses"])
    statuses = table.resolve(catalog, prefer=cfg["status_precedence"])
    prior = _load_prior(cfg, catalog)
    lam = _resolve_lambda(cfg)
    names = validate_indicator_names(cfg["indicators"])
    out_grid = _map_grid(cfg, stack)

    sinks = {}
    for name in names:
        meta = {"config": json.loads(echo), "indicator": name, "lambda": lam,
                "kernel_backend": BACKEND}
        sinks[name] = AsciiSink(
            os.path.join(out, f"{name}.asc"),
            out_grid,
            indicator_nodata(name),
            indicator_kind(name),
            meta=meta,
        )
    result = batch_predict_map(
        model, stack, lam, prior, statuses, names,
        out_grid=out_grid,
        batch_size=cfg["batch_size"],
        buffer_size=cfg["buffer_size"],
        workers=cfg["workers"],
        patch_radius=cfg["patch_radius"],
        sinks=sinks,
    )
    diag = result.diagnostics
    with open(os.path.join(out, MAP_REPORT), "w", encoding="utf-8") as fh:
        fh.write(f"# config: {echo}\n")
        fh.write(f"threshold lambda: {lam:.9g}\n")
        for line in diag.report_lines():
            fh.write(line + "\n")
    _write_csv(
        os.path.join(out, FILTER_REPORT),
        ["statistic", "value"],
        [[k, v] for k, v in diag.filter_report_rows()],
        echo,
    )

    for lon, lat in cfg["explain_points"]:
        assemblage = predict_point(
            model, stack, lam, prior, statuses, lon, lat, patch_radius=cfg["patch_radius"]
        )
        path = os.path.join(out, f"explain_{lon:g}_{lat:g}.csv")
        rows = [] if assemblage is None else indicators.explain_point(assemblage, statuses, catalog)
        indicators.write_explain_csv(path, rows, header_comment=f"config: {echo}")
    logger.info("%d indicator rasters written to %s", len(names), out)
    return 0


def _load_regions(cfg):
    layer = read_ascii(cfg["paths"]["regions"], kind=KIND_STATUS)
    names = {}
    if cfg["paths"]["region_catalog"]:
        names = load_region_catalog(cfg["paths"]["region_catalog"])
    return RegionRaster.from_layer(layer, names=names)


def cmd_zonal(cfg):
    require_paths(cfg, "regions")
    out = _out_dir(cfg)
    echo = canonical_echo(cfg)
    regions = _load_regions(cfg)
    min_cells = zonalmod.min_region_cells(cfg["min_region_km2"], regions.grid.step)
    names = validate_indicator_names(cfg["indicators"])

    layers = {}
    for name in names:
        path = os.path.join(out, f"{name}.asc")
        if not os.path.exists(path):
            raise ConfigError(f"raster for {name} not found at {path}; run 'atlas map' first")
        layers[name] = read_ascii(path, kind=indicator_kind(name))

    area_rows = []
    mean_stats = {}
    for name in names:
        if indicator_kind(name) == KIND_STATUS:
            table = zonalmod.zonal_area_table(layers[name], regions, min_cells=min_cells)
            for region in sorted(table):
                for code, pct in sorted(table[region].items()):
                    label = indicators.StatusCategory(code).name
                    area_rows.append([region, f"area_pct[{name}={label}]", _fmt(pct)])
        else:
            mean_stats[name] = zonalmod.zonal_mean(layers[name], regions, min_cells=min_cells)
    _write_csv(os.path.join(out, AREA_FILE), ["region", "statistic", "value"], area_rows, echo)

    mean_rows = []
    for name in sorted(mean_stats):
        for region in sorted(mean_stats[name]):
            mean_rows.append([region, f"mean[{name}]", _fmt(mean_stats[name][region])])
    _write_csv(os.path.join(out, MEAN_FILE), ["region", "statistic", "value"], mean_rows, echo)

    rank_rows = []
    for name in sorted(mean_stats):
        if not mean_stats[name]:
            continue
        ranked = zonalmod.rank_regions(mean_stats[name], cfg["rank_top_k"], "desc")
        for pos, (region, value) in enumerate(ranked, start=1):
            rank_rows.append([region, f"rank_{pos}[mean[{name}]]", _fmt(value)])
    _write_csv(os.path.join(out, RANK_FILE), ["region", "statistic", "value"], rank_rows, echo)

    corr_lines = [f"# config: {echo}"]
    threat_key = "I_THREAT" if "I_THREAT" in mean_stats else None
    h_key = "I_H" if "I_H" in mean_stats else None
    if threat_key and h_key:
        shared = sorted(set(mean_stats[threat_key]) & set(mean_stats[h_key]))
        if len(shared) >= 3:
            x = [mean_stats[threat_key][r] for r in shared]
            y = [mean_stats[h_key][r] for r in shared]
            try:
                rho, p = zonalmod.spearman(x, y)
                corr_lines.append(
                    f"spearman(mean[I_THREAT], mean[I_H]): rho={rho:.6g} p={p:.6g} n={len(shared)}"
                )
            except zonalmod.ConstantInputError as exc:
                corr_lines.append(f"spearman undefined: {exc}")
        else:
            corr_lines.append(f"spearman undefined: only {len(shared)} shared regions")
    else:
        corr_lines.append("spearman undefined: I_THREAT and I_H means both required")
    with open(os.path.join(out, CORR_FILE), "w", encoding="utf-8") as fh:
        fh.write("\n".join(corr_lines) + "\n")

    if cfg["paths"]["pa_regions"]:
        pa_layer = read_ascii(cfg["paths"]["pa_regions"], kind=KIND_STATUS)
        pa = RegionRaster.from_layer(pa_layer, names={1: "pa", 0: "outside"})
        pa_rows = []
        pa_means = {}
        for name in sorted(mean_stats):
            by_zone = zonalmod.zonal_mean(layers[name], pa, min_cells=1)
            pa_means[name] = by_zone
            for zone in sorted(by_zone):
                pa_rows.append([zone, f"mean[{name}]", _fmt(by_zone[zone])])
        for name in sorted(pa_means):
            base = name[: -len("_IUCN")] if name.endswith("_IUCN") else None
            if base and base in pa_means:
                for zone in ("pa", "outside"):
                    denom = pa_means[name].get(zone)
                    numer = pa_means[base].get(zone)
                    if denom and numer is not None and denom != 0:
                        pa_rows.append(
                            [zone, f"ratio[mean[{base}]/mean[{name}]]", _fmt(numer / denom)]
                        )
        _write_csv(os.path.join(out, PA_FILE), ["region", "statistic", "value"], pa_rows, echo)
    logger.info("zonal tables written to %s", out)
    return 0


def cmd_eval(cfg):
    require_paths(cfg, "occurrences", "stack")
    out = _out_dir(cfg)
    echo = canonical_echo(cfg)
    model, feats, labels = _calibration_inputs(cfg, "test")
    for k in cfg["eval_top_k"]:
        if not 1 <= k <= model.n_classes:
            raise ConfigError(
                f"eval_top_k entry {k} outside 1..{model.n_classes}"
            )
    probs = model.predict_proba_batch(feats)
    rows = []
    for k in cfg["eval_top_k"]:
        rows.append([
            k,
            _fmt(top_k_accuracy_from_probs(probs, labels, k)),
            _fmt(macro_top_k_accuracy_from_probs(probs, labels, k)),
        ])
    _write_csv(os.path.join(out, EVAL_FILE), ["k", "micro_topk", "macro_topk"], rows, echo)
    logger.info("test metrics for k=%s written to %s", list(cfg["eval_top_k"]), out)
    return 0


COMMANDS = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "map": cmd_map,
    "zonal": cmd_zonal,
    "eval": cmd_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="atlas",
        description="Calibrated species-assemblage prediction and risk-indicator mapping.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="path to the JSON run configuration")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a configuration key (dotted path; value parsed as JSON when possible)",
        )
        p.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides=args.overrides, out=args.out)
        return COMMANDS[args.command](cfg)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: surface the stage, stop with 1
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

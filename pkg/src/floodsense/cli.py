"""``floodsense`` command line: synth, impute, train, eval, predict, aggregate, export, selftest.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
A JSON config file (``--config``) is the base; flags override its values.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("floodsense")


class DataError(Exception):
    """Bad or missing input data; maps to exit code 2."""


def _setup_logging() -> None:
    level = os.environ.get("FDS_LOG", "warn").lower()
    if level not in LOG_LEVELS:
        raise click.UsageError(f"FDS_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise click.BadParameter("--threads must be >= 1", param_hint="--threads")
    import numba
    numba.config.THREADING_LAYER = "workqueue"   # always available; avoids probing TBB/OpenMP
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _load_config(path, section: str) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{path}: config file not found") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise DataError(f"{path}: config must be a JSON object")
    merged = {k: v for k, v in obj.items() if not isinstance(v, dict)}
    merged.update(obj.get(section, {}))
    return merged


def _pick(flag, cfg: dict, key: str, default):
    """Flag beats config beats default."""
    if flag is not None:
        return flag
    return cfg.get(key, default)


def common(fn):
    fn = click.option("--config", "config", type=click.Path(dir_okay=False), default=None,
                      help="JSON config file; flags override its values.")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Random seed (u64).")(fn)
    fn = click.option("--threads", type=int, default=None, help="Worker cap; default all cores.")(fn)
    fn = click.option("--out", "out", type=click.Path(), default=None, help="Output directory or file.")(fn)
    return fn


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Flood damage mapping from synthetic multimodal rasters."""
    _setup_logging()


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

@cli.command()
@common
@click.option("--chips", type=int, default=None, help="Number of chips (default 16).")
@click.option("--size", type=int, default=None, help="Chip size in pixels, multiple of 64 (default 64).")
@click.option("--vhr-fraction", type=float, default=None, help="Fraction of chips with VHR imagery (default 0.3).")
def synth(config, seed, threads, out, chips, size, vhr_fraction):
    """Generate a synthetic event: chips, footprints, PDE points."""
    from .data import SynthConfig, synth_event, write_event
    _set_threads(threads)
    c = _load_config(config, "synth")
    seed = _pick(seed, c, "seed", 0)
    size = _pick(size, c, "size", 64)
    cfg = SynthConfig(size=size, vhr_fraction=_pick(vhr_fraction, c, "vhr_fraction", 0.3))
    out = Path(_pick(out, c, "out", "event"))
    event = synth_event(seed, _pick(chips, c, "chips", 16), size, cfg)
    write_event(out, event)
    click.echo(f"wrote {len(event.chips)} chips, {len(event.footprints)} footprints, "
               f"{len(event.points)} PDE points to {out}")


# ---------------------------------------------------------------------------
# impute
# ---------------------------------------------------------------------------

def _event_inputs(data: Path):
    from .geo import read_footprints
    from .groundtruth import read_points_csv
    fp_path, pt_path = data / "footprints.geojson", data / "points.csv"
    for p in (fp_path, pt_path):
        if not p.exists():
            raise DataError(f"{p}: required input not found")
    return read_footprints(fp_path), read_points_csv(pt_path)


@cli.command()
@common
@click.option("--data", type=click.Path(file_okay=False), default=None,
              help="Event directory with footprints.geojson and points.csv.")
@click.option("--k", type=int, default=None, help="Neighbours averaged (default 5).")
@click.option("--d", "d", type=float, default=None, help="Search radius in metres (default 100).")
@click.option("--kmin", type=int, default=None, help="Minimum neighbours within d (default 5).")
@click.option("--dmax", type=float, default=None, help="Nearest-point cap in metres (default 100).")
def impute(config, seed, threads, out, data, k, d, kmin, dmax):
    """Build building-level damage labels from PDE points."""
    from .geo import write_footprints
    from .groundtruth import ImputeConfig, assignment_properties, build_ground_truth, elbow_k, elbow_wcss
    from .train import write_json
    _set_threads(threads)
    c = _load_config(config, "impute")
    data = Path(_pick(data, c, "data", "event"))
    cfg = ImputeConfig(k=_pick(k, c, "k", 5), d=_pick(d, c, "d", 100.0), k_min=_pick(kmin, c, "kmin", 5),
                       d_max=_pick(dmax, c, "dmax", 100.0))
    footprints, points = _event_inputs(data)
    assignments, km = build_ground_truth(points, footprints, cfg)
    out = Path(_pick(out, c, "out", data / "labels"))
    out.mkdir(parents=True, exist_ok=True)
    write_footprints(footprints, out / "assignments.geojson", assignment_properties(assignments))
    wcss = elbow_wcss([a.pde for a in assignments.values() if a.pde is not None])
    write_json({"centroids": km.centroids.tolist(), "breakpoints": km.breakpoints.tolist(),
                "wcss": km.wcss, "elbow_wcss": wcss, "elbow_k": elbow_k(wcss),
                "params": {"k": cfg.k, "d": cfg.d, "k_min": cfg.k_min, "d_max": cfg.d_max}},
               out / "kmeans.json")
    counts = {s: sum(a.source == s for a in assignments.values()) for s in ("direct", "nearest", "imputed", "none")}
    click.echo(" ".join(f"{k}={v}" for k, v in counts.items()))


# ---------------------------------------------------------------------------
# train / eval / predict
# ---------------------------------------------------------------------------

def _prepared_chips(data: Path, assignments_path=None):
    """Chips with BDA labels optionally replaced by rasterized assignments."""
    from .data import read_chips
    from .geo import read_footprints
    from .groundtruth import rasterize_labels, read_assignments
    chips = read_chips(data)
    if not chips:
        raise DataError(f"{data}: no chips found")
    classes = None
    if assignments_path is not None:
        ap = Path(assignments_path)
        if not ap.exists():
            raise DataError(f"{ap}: assignments file not found")
        assignments = read_assignments(ap)
        footprints = read_footprints(data / "footprints.geojson")
        for chip in chips:
            chip.labels["bda"] = rasterize_labels(assignments, footprints, chip.grid, "bda")
        classes = {fid: a.damage_class for fid, a in assignments.items()}
    return chips, classes


def _truth(data: Path) -> dict[int, int]:
    p = data / "truth.json"
    if not p.exists():
        raise DataError(f"{p}: ground-truth classes not found")
    return {int(k): int(v) for k, v in json.loads(p.read_text()).items()}


@cli.command()
@common
@click.option("--data", type=click.Path(file_okay=False), default=None, help="Event directory.")
@click.option("--labels", "labels_path", type=click.Path(dir_okay=False), default=None,
              help="assignments.geojson from impute; replaces the chips' BDA labels.")
@click.option("--wiring", type=click.IntRange(0, 4), default=None, help="Input wiring 0..4 (default 4).")
@click.option("--epochs", type=int, default=None, help="Training epochs (default 30).")
@click.option("--steps", type=int, default=None, help="Stop after this many optimizer steps.")
@click.option("--lr", type=float, default=None, help="Learning rate (default 1e-4).")
@click.option("--batch-size", type=int, default=None, help="Samples per micro-batch (default 2).")
@click.option("--accumulation", type=int, default=None, help="Micro-batches per step (default 8).")
def train(config, seed, threads, out, data, labels_path, wiring, epochs, steps, lr, batch_size, accumulation):
    """Train a model on the training split and save a run directory."""
    from .data import SplitSpec, compute_stats, normalize, split
    from .ffss import FloodDamageModel
    from .losses import TaskLossConfig
    from .train import TrainConfig, dataset_class_weights, save_checkpoint, train as run_train, write_json
    _set_threads(threads)
    c = _load_config(config, "train")
    data = Path(_pick(data, c, "data", "event"))
    tcfg = TrainConfig.from_json({k: v for k, v in c.items()
                                  if k in TrainConfig.__dataclass_fields__})
    overrides = {"seed": seed, "wiring": wiring, "epochs": epochs, "max_steps": steps, "lr": lr,
                 "batch_size": batch_size, "accumulation_steps": accumulation}
    tcfg = TrainConfig.from_json({**tcfg.to_json(), **{k: v for k, v in overrides.items() if v is not None}})
    chips, classes = _prepared_chips(data, _pick(labels_path, c, "labels", None))
    parts = split([ch.chip_id for ch in chips], SplitSpec(seed=tcfg.seed))
    train_chips = [ch for ch in chips if ch.chip_id in set(parts["train"])] or chips
    stats = compute_stats(train_chips)
    train_chips = [normalize(ch, stats) for ch in train_chips]
    if tcfg.use_class_weights:
        train_ids = {ch.chip_id for ch in train_chips}
        fp_chip = _footprint_chips(data)
        source = _truth(data) if classes is None else classes
        bda_counts = [cl for fid, cl in source.items() if fp_chip.get(fid) in train_ids]
        for task, w in dataset_class_weights(train_chips, bda_counts or None).items():
            base = tcfg.loss.tasks[task]
            if base.class_weights is None:
                tcfg.loss.tasks[task] = TaskLossConfig(base.lambda_ce, base.lambda_lov, w)
    out = Path(_pick(out, c, "out", "run"))
    out.mkdir(parents=True, exist_ok=True)
    model = FloodDamageModel(tcfg.model, wiring=tcfg.wiring, seed=tcfg.seed)
    trace = run_train(model, train_chips, tcfg, trace_path=out / "trace.csv")
    save_checkpoint(model, out / "model.fds")
    write_json(tcfg.to_json(), out / "config.json")
    write_json(stats.to_json(), out / "norm_stats.json")
    write_json(parts, out / "split.json")
    click.echo(f"trained {len(trace)} steps; final loss {trace[-1]:.6f}" if trace else "no training steps run")


def _footprint_chips(data: Path) -> dict[int, int]:
    obj = json.loads((data / "footprints.geojson").read_text())
    return {int(f["properties"]["id"]): int(f["properties"].get("chip", -1)) for f in obj["features"]}


def _load_run(run: Path, wiring=None):
    from .data import NormStats
    from .ffss import FloodDamageModel
    from .train import TrainConfig, load_checkpoint
    for name in ("config.json", "model.fds", "norm_stats.json"):
        if not (run / name).exists():
            raise DataError(f"{run / name}: run artefact not found")
    tcfg = TrainConfig.from_json(json.loads((run / "config.json").read_text()))
    model = FloodDamageModel(tcfg.model, wiring=tcfg.wiring if wiring is None else wiring, seed=tcfg.seed)
    try:
        load_checkpoint(model, run / "model.fds")
    except (KeyError, ValueError) as exc:
        raise DataError(f"{run / 'model.fds'}: {exc}") from exc
    stats = NormStats.from_json(json.loads((run / "norm_stats.json").read_text()))
    return model, tcfg, stats


@cli.command(name="eval")
@common
@click.option("--data", type=click.Path(file_okay=False), default=None, help="Event directory.")
@click.option("--run", "run_dir", type=click.Path(file_okay=False), default=None, help="Run directory from train.")
@click.option("--split", "split_name", type=click.Choice(["train", "val", "test", "all"]), default=None,
              help="Which chips to evaluate (default test).")
@click.option("--wiring", type=click.IntRange(0, 4), default=None, help="Override the run's wiring.")
@click.option("--stat", type=click.Choice(["median", "mean", "mode", "max"]), default=None,
              help="Footprint aggregation statistic (default median).")
def eval_cmd(config, seed, threads, out, data, run_dir, split_name, wiring, stat):
    """Pixel- and building-level metrics for a trained run."""
    from .data import normalize
    from .geo import read_footprints
    from .train import evaluate, write_json
    _set_threads(threads)
    c = _load_config(config, "eval")
    data = Path(_pick(data, c, "data", "event"))
    run = Path(_pick(run_dir, c, "run", "run"))
    model, tcfg, stats = _load_run(run, wiring)
    chips, _ = _prepared_chips(data)
    which = _pick(split_name, c, "split", "test")
    if which != "all":
        ids = set(json.loads((run / "split.json").read_text())[which])
        chips = [ch for ch in chips if ch.chip_id in ids] or chips
    chips = [normalize(ch, stats) for ch in chips]
    report = evaluate(model, chips, read_footprints(data / "footprints.geojson"), _truth(data),
                      _pick(stat, c, "stat", "median"), tcfg.loss)
    out = Path(_pick(out, c, "out", run / "report.json"))
    write_json(report, out)
    b = report.get("building", {})
    click.echo(f"building f1_hmean={b.get('f1_hmean', float('nan')):.4f} "
               f"upper_adjacent_hmean={b.get('upper_adjacent_f1_hmean', float('nan')):.4f}")


@cli.command()
@common
@click.option("--data", type=click.Path(file_okay=False), default=None, help="Event directory.")
@click.option("--run", "run_dir", type=click.Path(file_okay=False), default=None, help="Run directory from train.")
def predict(config, seed, threads, out, data, run_dir):
    """Write per-chip, per-task class rasters."""
    from .data import normalize
    from .geo import write_raster
    from .train import predict as run_predict
    _set_threads(threads)
    c = _load_config(config, "predict")
    data = Path(_pick(data, c, "data", "event"))
    run = Path(_pick(run_dir, c, "run", "run"))
    model, _, stats = _load_run(run)
    chips, _ = _prepared_chips(data)
    out = Path(_pick(out, c, "out", run / "predictions"))
    for chip in chips:
        if chip.grid is None:
            raise DataError(f"chip {chip.chip_id}: manifest carries no georeference")
        preds = run_predict(model, normalize(chip, stats))
        d = out / f"{chip.chip_id:05d}"
        d.mkdir(parents=True, exist_ok=True)
        for task, arr in preds.items():
            write_raster(d / task, arr, chip.grid)
    click.echo(f"wrote predictions for {len(chips)} chips to {out}")


# ---------------------------------------------------------------------------
# aggregate / export
# ---------------------------------------------------------------------------

def _raster_files(pred: Path) -> list[Path]:
    if (Path(str(pred) + ".json")).exists():
        return [pred]
    if not pred.is_dir():
        raise DataError(f"{pred}: prediction raster or directory not found")
    files = sorted(p.with_suffix("") for p in pred.rglob("bda.json"))
    if not files:
        raise DataError(f"{pred}: no bda rasters found")
    return files


@cli.command()
@common
@click.option("--pred", type=click.Path(), default=None,
              help="Prediction directory from predict, or one raster path without extension.")
@click.option("--footprints", type=click.Path(dir_okay=False), default=None, help="Footprint GeoJSON.")
@click.option("--stat", type=click.Choice(["median", "mean", "mode", "max"]), default=None,
              help="Aggregation statistic (default median).")
@click.option("--min-pixels", type=int, default=None, help="low_coverage threshold (default 4).")
@click.option("--var-threshold", type=float, default=None, help="high_disagreement threshold (default 0.5).")
def aggregate(config, seed, threads, out, pred, footprints, stat, min_pixels, var_threshold):
    """Collapse BDA rasters to one damage class per building."""
    from .damage_map import QualityThresholds, aggregate as run_aggregate
    from .geo import read_footprints, read_raster
    from .train import _chip_footprints, write_json
    _set_threads(threads)
    c = _load_config(config, "aggregate")
    pred = Path(_pick(pred, c, "pred", "run/predictions"))
    fps_path = Path(_pick(footprints, c, "footprints", "event/footprints.geojson"))
    if not fps_path.exists():
        raise DataError(f"{fps_path}: footprint file not found")
    fps = read_footprints(fps_path)
    th = QualityThresholds(_pick(min_pixels, c, "min_pixels", 4), _pick(var_threshold, c, "var_threshold", 0.5))
    st = _pick(stat, c, "stat", "median")
    records = {}
    for path in _raster_files(pred):
        arr, grid = read_raster(path)
        chip_fps = _chip_footprints(fps, grid)
        if not chip_fps:
            continue
        for rec in run_aggregate(arr, grid, chip_fps, st, th):
            records[rec.footprint_id] = rec
    if not records:
        raise DataError(f"{pred}: no footprint falls inside any prediction raster")
    out = Path(_pick(out, c, "out", "records.json"))
    write_json({"stat": st, "records": [vars(records[k]) for k in sorted(records)]}, out)
    click.echo(f"aggregated {len(records)} buildings with {st}")


@cli.command()
@common
@click.option("--records", type=click.Path(dir_okay=False), default=None, help="records.json from aggregate.")
@click.option("--footprints", type=click.Path(dir_okay=False), default=None, help="Footprint GeoJSON.")
@click.option("--style/--no-style", default=None, help="Embed fill colours (default on).")
def export(config, seed, threads, out, records, footprints, style):
    """Write the building damage map as styled GeoJSON."""
    from .damage_map import BuildingDamageRecord, export_geojson
    from .geo import read_footprints
    _set_threads(threads)
    c = _load_config(config, "export")
    rec_path = Path(_pick(records, c, "records", "records.json"))
    if not rec_path.exists():
        raise DataError(f"{rec_path}: records file not found")
    try:
        recs = [BuildingDamageRecord(**r) for r in json.loads(rec_path.read_text())["records"]]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{rec_path}: malformed records ({exc})") from exc
    fps = read_footprints(Path(_pick(footprints, c, "footprints", "event/footprints.geojson")))
    out = Path(_pick(out, c, "out", "damage_map.geojson"))
    export_geojson(recs, fps, out, style=_pick(style, c, "style", True))
    click.echo(f"wrote {len(recs)} buildings to {out}")


@cli.command()
@common
def selftest(config, seed, threads, out):
    """Run the built-in analytic and oracle checks."""
    from .selftest import run_all
    _set_threads(threads)
    if not run_all(click.echo):
        raise FloatingPointError("selftest failed")


def run(argv=None) -> int:
    """Entry point returning an exit code instead of raising."""
    try:
        rv = cli.main(args=argv, prog_name="floodsense", standalone_mode=False)
        return rv if isinstance(rv, int) else EXIT_OK
    except click.exceptions.Abort:
        return EXIT_USAGE
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except FloatingPointError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError, np.linalg.LinAlgError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Command-line workflow: prepare-data, train, censor, attack, evaluate,
sweep, premise.

Every command is seeded and reproducible: identical flags and seed produce
byte-identical artifacts (manifests exclude only wall-clock fields). Exit
codes: 0 success, 2 usage error, 3 input integrity error, 4 numeric failure.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import logging
import os
import pathlib
import sys
import time
import zipfile

import click
import numpy as np

EXIT_INTEGRITY = 3
EXIT_NUMERIC = 4

log = logging.getLogger(__name__)


def _setup_runtime() -> None:
    import torch
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("CBNS_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))


def _hash_file(path) -> str:
    h = hashlib.sha256()
    p = pathlib.Path(path)
    if p.is_dir():
        for child in sorted(p.rglob("*")):
            if child.is_file():
                h.update(child.name.encode())
                h.update(child.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


def _write_manifest(out_dir, command: str, config: dict, seed,
                    inputs: dict, outputs: list, started: float) -> None:
    """Atomically written run record; every artifact in out_dir references it."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(k): _hash_file(v) for k, v in inputs.items() if pathlib.Path(v).exists()},
        "outputs": [str(o) for o in outputs],
        "duration_seconds": round(time.time() - started, 3),
    }
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "run_manifest.json.tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    tmp.replace(out_dir / "run_manifest.json")


def _guarded(fn):
    """Map library errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        from .core import IntegrityError
        from .data import OffParseError
        from .training import NonFiniteLossError
        try:
            return fn(*args, **kwargs)
        except NonFiniteLossError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except (IntegrityError, OffParseError, FileNotFoundError,
                zipfile.BadZipFile) as exc:
            click.echo(f"input error: {exc}", err=True)
            sys.exit(EXIT_INTEGRITY)

    return wrapper


@click.group()
def main() -> None:
    """Censor sensitive attributes from point-cloud datasets by noisy
    sampling, and score the resulting privacy-utility trade-off."""
    _setup_runtime()


# ---------------------------------------------------------------------------
@main.group("prepare-data")
def prepare_data() -> None:
    """Build a dataset directory from a source."""


@prepare_data.command("synth")
@click.option("--overlap", type=float, default=0.0, show_default=True,
              help="Fraction of points jointly encoding both attributes.")
@click.option("--classes-t", type=int, default=4, show_default=True)
@click.option("--classes-s", type=int, default=4, show_default=True)
@click.option("--n", type=int, default=512, show_default=True)
@click.option("--samples-per-pair", type=int, default=25, show_default=True)
@click.option("--noise-floor", type=float, default=0.02, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@_guarded
def prepare_synth(overlap, classes_t, classes_s, n, samples_per_pair,
                  noise_floor, seed, out) -> None:
    """Generate the synthetic two-attribute benchmark."""
    from .data import SynthConfig, save_dataset, synth_generate
    started = time.time()
    config = SynthConfig(c_t=classes_t, c_s=classes_s, n=n, overlap=overlap,
                         noise_floor=noise_floor,
                         samples_per_pair=samples_per_pair, seed=seed)
    train_set, test_set = synth_generate(config)
    save_dataset(out, train_set, test_set, seed=seed,
                 provenance={"source": "synth", **dataclasses.asdict(config)})
    _write_manifest(out, "prepare-data synth", dataclasses.asdict(config),
                    seed, {}, [out], started)
    click.echo(f"wrote {len(train_set)} train + {len(test_set)} test samples to {out}")


@prepare_data.command("modelnet")
@click.option("--root", required=True, type=click.Path(exists=True))
@click.option("--classes", default=",".join(("person", "plant", "sofa", "bed")),
              show_default=True, help="4 class names: 2 living then 2 non-living.")
@click.option("--n", type=int, default=2048, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@_guarded
def prepare_modelnet(root, classes, n, seed, out) -> None:
    """Surface-sample an OFF mesh tree into labeled clouds."""
    from .data import load_modelnet_subset, save_dataset
    started = time.time()
    names = tuple(c.strip() for c in classes.split(","))
    if len(names) != 4:
        raise click.UsageError("--classes must list exactly 4 names")
    train_set, test_set = load_modelnet_subset(root, classes=names,
                                               living=names[:2], n=n, seed=seed)
    save_dataset(out, train_set, test_set, seed=seed,
                 provenance={"source": "modelnet", "root": str(root),
                             "classes": list(names), "n": n})
    _write_manifest(out, "prepare-data modelnet",
                    {"classes": list(names), "n": n}, seed,
                    {"root": root}, [out], started)
    click.echo(f"wrote {len(train_set)} train + {len(test_set)} test samples to {out}")


# ---------------------------------------------------------------------------
@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON file of TrainConfig fields; flags override it.")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--kind", type=str, default=None)
@click.option("--lambda", "lam", type=float, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--r", type=int, default=None)
@click.option("--granularity", type=click.Choice(["shared", "pointwise"]), default=None)
@click.option("--sigma", type=float, default=None, help="Fixed noise scale for *-AN kinds.")
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--feature-width", type=int, default=None)
@click.option("--eval-every", type=int, default=None)
@click.option("--seed", type=int, default=None)
@_guarded
def cmd_train(config_path, data_path, out, kind, lam, alpha, r, granularity,
              sigma, steps, batch_size, feature_width, eval_every, seed) -> None:
    """Train a censoring pipeline; writes checkpoint + history.csv."""
    from .censor import save_checkpoint
    from .data import load_dataset, load_manifest
    from .training import TrainConfig, train

    started = time.time()
    raw = {}
    if config_path:
        with open(config_path) as f:
            raw = json.load(f)
    overrides = {"kind": kind, "lam": lam, "alpha": alpha, "r": r,
                 "granularity": granularity, "fixed_sigma": sigma,
                 "total_steps": steps, "batch_size": batch_size,
                 "feature_width": feature_width, "eval_every": eval_every,
                 "seed": seed}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"bad config: {exc}")
    problems = config.validate()
    if problems:
        raise click.UsageError("invalid config:\n  " + "\n  ".join(problems))

    manifest = load_manifest(data_path)
    train_set = load_dataset(data_path, "train")
    test_set = load_dataset(data_path, "test") if "test" in manifest["splits"] else None

    model, _, history = train(config, train_set, test_set)

    out_dir = pathlib.Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.zip"
    save_checkpoint(ckpt, model, extra={"config": config.to_dict()})
    history.write_csv(out_dir / "history.csv")
    if history.evals:
        with open(out_dir / "eval_snapshots.json", "w") as f:
            json.dump([dataclasses.asdict(s) for s in history.evals],
                      f, indent=2, sort_keys=True)
    _write_manifest(out_dir, "train", config.to_dict(), config.seed,
                    {"data": data_path}, [ckpt, out_dir / "history.csv"], started)
    final = history.rows[-1] if history.rows else None
    click.echo(f"trained {config.kind} for {config.total_steps} steps -> {ckpt}")
    if final:
        click.echo(f"final losses: util={final.l_util:.4f} priv={final.l_priv:.4f} "
                   f"sample={final.l_sample:.4f}")


# ---------------------------------------------------------------------------
@main.command("censor")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@_guarded
def cmd_censor(checkpoint, data_path, out, seed) -> None:
    """Apply release-mode censoring to every split of a dataset."""
    from .censor import censor_dataset, checkpoint_hash, load_checkpoint
    from .data import load_dataset, load_manifest, save_dataset

    started = time.time()
    model = load_checkpoint(checkpoint)
    manifest = load_manifest(data_path)
    censored = []
    for split in sorted(manifest["splits"]):
        ds = load_dataset(data_path, split)
        censored.append(censor_dataset(model, ds, seed + (0 if split == "train" else 1)))
    save_dataset(out, *censored, seed=seed,
                 provenance={"source": "censor",
                             "checkpoint_hash": checkpoint_hash(checkpoint),
                             "seed": seed, "r": model.r, "kind": model.kind})
    _write_manifest(out, "censor", {"r": model.r, "kind": model.kind}, seed,
                    {"checkpoint": checkpoint, "data": data_path}, [out], started)
    click.echo(f"censored dataset written to {out}")


@main.command("attack")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--pretrain-steps", type=int, default=1000, show_default=True)
@click.option("--finetune-steps", type=int, default=1000, show_default=True)
@click.option("--feature-width", type=int, default=256, show_default=True)
@_guarded
def cmd_attack(checkpoint, data_path, out, seed, pretrain_steps,
               finetune_steps, feature_width) -> None:
    """Fine-tuned offline attack; writes a privacy score JSON."""
    from .censor import load_checkpoint
    from .core import RandomStream
    from .data import load_dataset
    from .evaluation import offline_attack

    started = time.time()
    model = load_checkpoint(checkpoint)
    train_set = load_dataset(data_path, "train")
    test_set = load_dataset(data_path, "test")
    privacy = offline_attack(model, train_set, test_set, RandomStream(seed),
                             pretrain_steps=pretrain_steps,
                             finetune_steps=finetune_steps,
                             feature_width=feature_width)
    out_path = pathlib.Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    chance = 1.0 / len(train_set.sensitive_classes)
    with open(out_path, "w") as f:
        json.dump({"privacy": privacy, "chance": chance, "seed": seed,
                   "pretrain_steps": pretrain_steps,
                   "finetune_steps": finetune_steps}, f, indent=2, sort_keys=True)
    _write_manifest(out_path.parent, "attack",
                    {"pretrain_steps": pretrain_steps,
                     "finetune_steps": finetune_steps}, seed,
                    {"checkpoint": checkpoint, "data": data_path},
                    [out_path], started)
    click.echo(f"offline attack accuracy {privacy:.4f} (chance {chance:.4f}) -> {out}")


@main.command("evaluate")
@click.option("--points", "points_path", required=True, type=click.Path(exists=True),
              help="Trade-off CSV (config_id, seed, lambda, sigma, kind, privacy, utility).")
@click.option("--out", required=True, type=click.Path())
@click.option("--plot", is_flag=True, help="Also emit a scatter + front PNG.")
@_guarded
def cmd_evaluate(points_path, out, plot) -> None:
    """Pareto front + normalized hypervolume from a trade-off CSV."""
    from .evaluation import pareto_report, plot_tradeoff, read_tradeoff_csv

    started = time.time()
    points = read_tradeoff_csv(points_path)
    if not points:
        raise click.UsageError(f"no points in {points_path}")
    report = pareto_report(points)
    out_dir = pathlib.Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "pareto_report.json"
    with open(report_path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    outputs = [report_path]
    if plot:
        plot_path = out_dir / "tradeoff.png"
        plot_tradeoff(points, plot_path)
        outputs.append(plot_path)
    _write_manifest(out_dir, "evaluate", {}, None,
                    {"points": points_path}, outputs, started)
    click.echo(f"nhv={report.nhv:.4f} over {len(points)} points "
               f"({len(report.front)} on the front) -> {report_path}")


@main.command("sweep")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--kind", "kinds", multiple=True, default=("CBNS",), show_default=True)
@click.option("--lambda-grid", default="0.1,0.3,1,3,10", show_default=True)
@click.option("--sigma-grid", default="0.01,0.05,0.1,0.2", show_default=True)
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--r", type=int, default=64, show_default=True)
@click.option("--steps", type=int, default=2000, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--feature-width", type=int, default=256, show_default=True)
@click.option("--alpha", type=float, default=0.5, show_default=True)
@click.option("--eval-steps", type=int, default=1000, show_default=True,
              help="Offline pretrain/fine-tune/user budgets.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Parallel cell workers (cells are independent).")
@click.option("--plot", is_flag=True)
@_guarded
def cmd_sweep(data_path, out, kinds, lambda_grid, sigma_grid, seeds, r, steps,
              batch_size, feature_width, alpha, eval_steps, jobs, plot) -> None:
    """Trade-off sweep over hyperparameter grids; resumes completed cells."""
    from .data import load_dataset
    from .evaluation import (pareto_report, plot_tradeoff, sweep,
                             write_tradeoff_csv)
    from .training import TrainConfig

    started = time.time()
    lam_grid = [float(x) for x in lambda_grid.split(",") if x.strip()]
    sig_grid = [float(x) for x in sigma_grid.split(",") if x.strip()]
    seed_list = [int(x) for x in seeds.split(",") if x.strip()]
    train_set = load_dataset(data_path, "train")
    test_set = load_dataset(data_path, "test")
    base = TrainConfig(r=r, alpha=alpha, total_steps=steps,
                       batch_size=batch_size, feature_width=feature_width)
    out_dir = pathlib.Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if jobs > 1:
        points, errors = _sweep_parallel(base, lam_grid, sig_grid, seed_list,
                                         data_path, list(kinds), out_dir,
                                         eval_steps, jobs)
    else:
        points, errors = sweep(base, lam_grid, sig_grid, seed_list,
                               train_set, test_set, kinds=list(kinds),
                               out_dir=out_dir, pretrain_steps=eval_steps,
                               finetune_steps=eval_steps, utility_steps=eval_steps)

    points = sorted(points, key=lambda p: (p.config_id, p.seed))
    csv_path = out_dir / "tradeoff.csv"
    write_tradeoff_csv(points, csv_path)
    report = pareto_report(points)
    with open(out_dir / "pareto_report.json", "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    outputs = [csv_path, out_dir / "pareto_report.json"]
    if plot:
        plot_tradeoff(points, out_dir / "tradeoff.png")
        outputs.append(out_dir / "tradeoff.png")
    _write_manifest(out_dir, "sweep",
                    {"kinds": list(kinds), "lambda_grid": lam_grid,
                     "sigma_grid": sig_grid, "seeds": seed_list,
                     "steps": steps, "eval_steps": eval_steps},
                    seed_list, {"data": data_path}, outputs, started)
    for cid, seed, msg in errors:
        click.echo(f"cell {cid}-s{seed} FAILED: {msg}", err=True)
    click.echo(f"{len(points)} points, nhv={report.nhv:.4f} -> {csv_path}")
    if errors:
        sys.exit(EXIT_NUMERIC)


def _sweep_cell_worker(args):
    """Module-level so ProcessPoolExecutor can pickle it."""
    (kind, lam, sigma, seed, base_dict, data_path, eval_steps, threads) = args
    import torch
    torch.set_num_threads(threads)
    from .data import load_dataset
    from .evaluation import run_cell
    from .training import TrainConfig
    base = TrainConfig.from_dict(base_dict)
    train_set = load_dataset(data_path, "train")
    test_set = load_dataset(data_path, "test")
    point = run_cell(kind, lam, sigma, seed, base, train_set, test_set,
                     pretrain_steps=eval_steps, finetune_steps=eval_steps,
                     utility_steps=eval_steps)
    return dataclasses.asdict(point)


def _sweep_parallel(base, lam_grid, sig_grid, seed_list, data_path, kinds,
                    out_dir, eval_steps, jobs):
    import concurrent.futures

    from .evaluation import TradeoffPoint, cell_id, sweep_cells

    all_kinds = list(kinds)
    if "NO-PRIVACY" not in all_kinds:
        all_kinds.append("NO-PRIVACY")
    cell_dir = out_dir / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    jobs_list, points, errors = [], [], []
    for kind in all_kinds:
        for lam, sigma in sweep_cells(kind, lam_grid, sig_grid):
            for seed in seed_list:
                cid = cell_id(kind, lam, sigma)
                cell_path = cell_dir / f"{cid}-s{seed}.json"
                if cell_path.exists():
                    with open(cell_path) as f:
                        rec = json.load(f)
                    points.append(TradeoffPoint(
                        privacy=rec["privacy"], utility=rec["utility"],
                        config_id=rec["config_id"], seed=rec["seed"],
                        lam=rec["lambda"], sigma=rec["sigma"], kind=rec["kind"]))
                    continue
                jobs_list.append((kind, lam, sigma, seed))

    threads = max(1, (os.cpu_count() or 1) // jobs)
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = {
            pool.submit(_sweep_cell_worker,
                        (kind, lam, sigma, seed, base.to_dict(),
                         str(data_path), eval_steps, threads)): (kind, lam, sigma, seed)
            for kind, lam, sigma, seed in jobs_list}
        for fut in concurrent.futures.as_completed(futures):
            kind, lam, sigma, seed = futures[fut]
            cid = cell_id(kind, lam, sigma)
            try:
                rec = fut.result()
            except Exception as exc:
                log.exception("sweep cell %s-s%d failed", cid, seed)
                errors.append((cid, seed, str(exc)))
                continue
            point = TradeoffPoint(**rec)
            points.append(point)
            cell_path = cell_dir / f"{cid}-s{seed}.json"
            tmp = cell_path.with_suffix(".tmp")
            with open(tmp, "w") as f:
                json.dump({"privacy": point.privacy, "utility": point.utility,
                           "config_id": point.config_id, "seed": point.seed,
                           "lambda": point.lam, "sigma": point.sigma,
                           "kind": point.kind}, f, indent=2, sort_keys=True)
            tmp.replace(cell_path)
    return points, errors


@main.command("premise")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--steps", type=int, default=1000, show_default=True)
@click.option("--top-k", type=int, default=100, show_default=True)
@click.option("--feature-width", type=int, default=256, show_default=True)
@_guarded
def cmd_premise(data_path, out, seed, steps, top_k, feature_width) -> None:
    """Critical-set overlap between task and sensitive classifiers."""
    from .core import RandomStream
    from .data import load_dataset
    from .evaluation import premise_report

    started = time.time()
    train_set = load_dataset(data_path, "train")
    test_set = load_dataset(data_path, "test")
    report = premise_report(train_set, test_set, RandomStream(seed),
                            steps=steps, top_k=top_k, feature_width=feature_width)
    out_path = pathlib.Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    _write_manifest(out_path.parent, "premise",
                    {"steps": steps, "top_k": top_k}, seed,
                    {"data": data_path}, [out_path], started)
    click.echo(f"critical-set mIoU (top-{top_k}) = {report['miou']:.4f} -> {out}")


if __name__ == "__main__":
    main()

"""Pipeline entry point.

Subcommands hand artifacts to each other on disk under one output
directory::

    marginlab dataset  --config run.json        # dataset/  (tensors + manifests)
    marginlab zoo      --config run.json        # zoo/      (models + zoo.csv)
    marginlab measure  --config run.json        # basis/, margins/
    marginlab evaluate --config run.json        # report/   (tau + CMI summary)
    marginlab sweep    --config run.json        # report/   (sweep CSVs)

Every command echoes the fully resolved config and the checksums of the
artifacts it consumed into the output directory.  Exit codes: 0 success,
2 config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation, manifold, margin, train
from .errors import ConfigError, DataError, MarginLabError, NumericError
from .net import load_network
from .tensorio import DatasetSplit, file_checksum, load_dataset, save_dataset

DEFAULTS = {
    "seed": 0,
    "out_dir": "marginlab-run",
    "dataset": {
        "generator": "annuli",
        "ambient_dim": 20,
        "signal_dim": 3,
        "noise_std": 0.01,
        "train_samples": 2000,
        "test_samples": 2000,
        "num_classes": 3,
    },
    "zoo": {
        "grid": {
            "depth": [2, 3],
            "width": [32, 64],
            "learning_rate": [0.1],
            "batch_size": [16],
            "weight_decay": [0.0],
            "label_noise_fraction": [0.0, 0.15, 0.3],
            "train_subset_size": [150, 400],
        },
    },
    "margin": {
        "learning_rate": 0.25,
        "tolerance": 0.01,
        "max_iterations": 100,
        "clip": True,
        "sample_budget": 5000,
    },
    "basis": {"policy": "kneedle"},
    "modes": ["input-taylor", "constrained-deepfool"],
    "sweeps": {
        "component_window": {"window": 4, "starts": None},
        "m_sweep": {"m_range": None},
        "sample_count": {"counts": None},
        "clipping": {},
    },
}


def _merge(defaults, overrides):
    if not isinstance(overrides, dict):
        return overrides
    merged = dict(defaults)
    for key, value in overrides.items():
        if key in merged and isinstance(merged[key], dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: str | None, overrides: dict) -> dict:
    config = {}
    if path is not None:
        try:
            config = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    resolved = _merge(DEFAULTS, config)
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    unknown = set(resolved) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return resolved


def _echo_provenance(out_dir: Path, config: dict, consumed: list[Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True)
    )
    checksums = {str(p.relative_to(out_dir)): file_checksum(p)
                 for p in sorted(consumed) if p.exists()}
    (out_dir / "input_checksums.json").write_text(
        json.dumps(checksums, indent=2, sort_keys=True)
    )


def _dataset_config(config: dict) -> train.DatasetConfig:
    section = dict(config["dataset"])
    section.pop("seed", None)
    try:
        return train.DatasetConfig(**section)
    except TypeError as exc:
        raise ConfigError(f"bad dataset config: {exc}") from exc


def _dataset_seed(config: dict) -> int:
    return int(config["dataset"].get("seed", config["seed"]))


def cmd_dataset(config: dict) -> None:
    out_dir = Path(config["out_dir"])
    cfg = _dataset_config(config)
    train_split, test_split = train.make_synthetic_dataset(cfg, _dataset_seed(config))
    dataset_dir = out_dir / "dataset"
    save_dataset(train_split, dataset_dir, "train")
    save_dataset(test_split, dataset_dir, "test")
    _echo_provenance(out_dir, config, [])


def _load_splits(out_dir: Path) -> tuple[DatasetSplit, DatasetSplit]:
    dataset_dir = out_dir / "dataset"
    train_manifest = dataset_dir / "train_manifest.json"
    test_manifest = dataset_dir / "test_manifest.json"
    if not train_manifest.exists():
        raise DataError(f"no dataset under {dataset_dir}; run the dataset command first")
    return load_dataset(train_manifest), load_dataset(test_manifest)


def expand_grid(config: dict) -> list[train.HyperParams]:
    from itertools import product

    grid_spec = config["zoo"]["grid"]
    base_seed = int(config["zoo"].get("seed", config["seed"]))
    axes = {
        "depth": grid_spec.get("depth", [1]),
        "width": grid_spec.get("width", [16]),
        "learning_rate": grid_spec.get("learning_rate", [0.1]),
        "batch_size": grid_spec.get("batch_size", [32]),
        "weight_decay": grid_spec.get("weight_decay", [0.0]),
        "label_noise_fraction": grid_spec.get("label_noise_fraction", [0.0]),
        "train_subset_size": grid_spec.get("train_subset_size", [1000]),
    }
    unknown = set(grid_spec) - set(axes) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown grid axes: {sorted(unknown)}")
    points = []
    keys = list(axes)
    for idx, combo in enumerate(product(*(axes[k] for k in keys))):
        seeds = grid_spec.get("seed", [None])
        for seed in seeds:
            hp = train.HyperParams(
                **dict(zip(keys, combo)),
                seed=int(seed) if seed is not None else base_seed * 10000 + idx,
            )
            hp.validate()
            points.append(hp)
    return points


def cmd_zoo(config: dict) -> None:
    out_dir = Path(config["out_dir"])
    train_split, test_split = _load_splits(out_dir)
    grid = expand_grid(config)
    if not grid:
        raise ConfigError("hyperparameter grid is empty")
    zoo_dir = out_dir / "zoo"
    meta_dir = zoo_dir / "meta"
    meta_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for hp in grid:
        meta_path = meta_dir / f"{hp.model_id()}.json"
        if meta_path.exists():
            entries.append(train.load_entry_metadata(meta_path))
            continue
        entry = train.train_model(train_split, test_split, hp)
        if not entry.failed:
            from .net import save_network

            manifest = save_network(entry.network, zoo_dir / "models", entry.model_id)
            entry.manifest_path = str(manifest.relative_to(out_dir))
        train.save_entry_metadata(entry, meta_path)
        entries.append(entry)
    converged = [e for e in entries if not e.failed]
    if not converged:
        raise NumericError("every zoo entry diverged")
    train.write_zoo_csv(zoo_dir / "zoo.csv", entries)
    spread = max(e.test_accuracy for e in converged) - min(
        e.test_accuracy for e in converged
    )
    (zoo_dir / "spread.json").write_text(
        json.dumps({"test_accuracy_spread": spread, "converged": len(converged),
                    "failed": len(entries) - len(converged)}, indent=2, sort_keys=True)
    )
    _echo_provenance(out_dir, config, [out_dir / "dataset" / "train_manifest.json"])


def load_zoo_models(out_dir: Path) -> list[evaluation.ZooModel]:
    meta_dir = out_dir / "zoo" / "meta"
    if not meta_dir.exists():
        raise DataError(f"no zoo under {out_dir}; run the zoo command first")
    models = []
    for meta_path in sorted(meta_dir.glob("*.json")):
        entry = train.load_entry_metadata(meta_path)
        if entry.failed:
            continue
        network = load_network(out_dir / entry.manifest_path)
        models.append(
            evaluation.ZooModel(
                model_id=entry.model_id,
                network=network,
                test_accuracy=entry.test_accuracy,
                gap=entry.gap,
                hyperparams={
                    "depth": entry.hyperparams.depth,
                    "width": entry.hyperparams.width,
                    "label_noise_fraction": entry.hyperparams.label_noise_fraction,
                    "train_subset_size": entry.hyperparams.train_subset_size,
                },
            )
        )
    if not models:
        raise DataError("zoo metadata holds no converged models")
    return models


def _resolve_basis(config: dict, out_dir: Path, train_split: DatasetSplit):
    """Fit (or reuse) the PCA basis and the selected subspace size."""
    basis_dir = out_dir / "basis"
    sidecar = basis_dir / "pca_basis.json"
    checksum = file_checksum(out_dir / "dataset" / "train_inputs.mpt")
    if sidecar.exists():
        basis, m, fallback, recorded = manifold.load_basis(sidecar)
        if recorded == checksum:
            return basis, m, fallback
    basis = manifold.fit_pca(train_split.inputs)
    policy = config["basis"].get("policy", "kneedle")
    if policy == "kneedle":
        positive = basis.explained_variance[basis.explained_variance > 0]
        selection = manifold.select_m_kneedle(positive)
    elif policy == "fixed":
        m = int(config["basis"].get("m", 0))
        if not 1 <= m <= basis.m:
            raise ConfigError(f"fixed basis policy needs 1 <= m <= {basis.m}")
        selection = manifold.ComponentSelection(m=m, fallback=False)
    else:
        raise ConfigError(f"unknown basis policy {policy!r}")
    manifold.save_basis(basis, basis_dir, "pca", selection, checksum)
    return basis, selection.m, selection.fallback


def _margin_config(config: dict) -> margin.MarginConfig:
    section = dict(config["margin"])
    section.pop("sample_seed", None)
    try:
        cfg = margin.MarginConfig(**section)
    except TypeError as exc:
        raise ConfigError(f"bad margin config: {exc}") from exc
    cfg.validate()
    return cfg


def _sample_indices(config: dict, train_split: DatasetSplit, cfg: margin.MarginConfig):
    seed = int(config["margin"].get("sample_seed", config["seed"]))
    return margin.select_sample_indices(train_split, cfg.sample_budget, seed)


def cmd_measure(config: dict, jobs: int = 1) -> None:
    out_dir = Path(config["out_dir"])
    train_split, _ = _load_splits(out_dir)
    models = load_zoo_models(out_dir)
    cfg = _margin_config(config)
    basis_full, m, _ = _resolve_basis(config, out_dir, train_split)
    basis = basis_full.truncate(m)
    indices = _sample_indices(config, train_split, cfg)
    margins_dir = out_dir / "margins"
    summary_rows: dict[str, dict[str, float]] = {mo.model_id: {} for mo in models}
    for mode in config["modes"]:
        if mode not in margin.MODES:
            raise ConfigError(f"unknown margin mode {mode!r}")
        mode_dir = margins_dir / mode
        mode_dir.mkdir(parents=True, exist_ok=True)
        summaries = evaluation._mode_summaries(
            models, train_split, mode, cfg,
            basis if mode.startswith("constrained") else None,
            indices, jobs,
        )
        for model in models:
            summary = summaries[model.model_id]
            margin.write_margin_records(
                mode_dir / f"{model.model_id}.csv", mode, summary.records
            )
            summary_rows[model.model_id][mode] = summary.mean
    with open(margins_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", *config["modes"]])
        for model in models:
            writer.writerow(
                [model.model_id]
                + [repr(summary_rows[model.model_id][mode]) for mode in config["modes"]]
            )
    _echo_provenance(
        out_dir, config,
        [out_dir / "zoo" / "zoo.csv", out_dir / "dataset" / "train_manifest.json"],
    )


def _load_measure_summary(out_dir: Path) -> tuple[list[str], dict[str, dict[str, float]]]:
    path = out_dir / "margins" / "summary.csv"
    if not path.exists():
        raise DataError(f"no margin summary at {path}; run the measure command first")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    modes = rows[0][1:]
    table = {row[0]: dict(zip(modes, map(float, row[1:]))) for row in rows[1:]}
    return modes, table


def cmd_evaluate(config: dict) -> None:
    out_dir = Path(config["out_dir"])
    models = load_zoo_models(out_dir)
    modes, table = _load_measure_summary(out_dir)
    for mode in config["modes"]:
        if mode not in modes:
            raise DataError(f"margin summary lacks mode {mode!r}; rerun measure")
    report_dir = out_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for mode in modes:
        values = [table[m.model_id][mode] for m in models]
        series = evaluation.MeasureSeries(
            model_ids=[m.model_id for m in models],
            values=np.asarray(values),
            gaps=np.asarray([m.gap for m in models]),
            test_accuracies=np.asarray([m.test_accuracy for m in models]),
            hyperparams={
                key: [m.hyperparams[key] for m in models]
                for key in models[0].hyperparams
            },
        )
        summary[mode] = {
            "kendall_tau": evaluation.kendall_tau(
                series.values, series.test_accuracies
            ),
            "cmi_score": evaluation.cmi_score(series),
        }
    (report_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True)
    )
    with open(report_dir / "scatter.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", "depth", "mode", "mean_margin", "test_accuracy"])
        for mode in modes:
            for m in models:
                writer.writerow(
                    [m.model_id, m.hyperparams["depth"], mode,
                     repr(table[m.model_id][mode]), repr(m.test_accuracy)]
                )
    _echo_provenance(out_dir, config, [out_dir / "margins" / "summary.csv"])


def _write_curve(path: Path, curve: evaluation.SweepCurve, model_ids: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "tau", "flagged", *model_ids])
        for point in curve.points:
            writer.writerow(
                [repr(point.parameter), repr(point.tau), int(point.flagged)]
                + [repr(point.per_model_means.get(mid, float("nan")))
                   for mid in model_ids]
            )


def cmd_sweep(config: dict, jobs: int = 1) -> None:
    out_dir = Path(config["out_dir"])
    train_split, _ = _load_splits(out_dir)
    models = load_zoo_models(out_dir)
    cfg = _margin_config(config)
    basis_full, m, _ = _resolve_basis(config, out_dir, train_split)
    indices = _sample_indices(config, train_split, cfg)
    report_dir = out_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    model_ids = [mo.model_id for mo in models]
    sweeps = config["sweeps"]

    if "component_window" in sweeps:
        spec = sweeps["component_window"]
        window = int(spec.get("window", 10))
        starts = spec.get("starts")
        curve = evaluation.component_window_sweep(
            models, train_split, basis_full, cfg, indices,
            window=window, starts=starts, jobs=jobs,
        )
        _write_curve(report_dir / "component_window.csv", curve, model_ids)

    if "m_sweep" in sweeps:
        spec = sweeps["m_sweep"]
        m_range = spec.get("m_range") or list(range(1, basis_full.m + 1))
        curve = evaluation.m_sweep(
            models, train_split, basis_full, cfg, indices,
            m_range=m_range, kneedle_m=m, jobs=jobs,
        )
        _write_curve(report_dir / "m_sweep.csv", curve, model_ids)

    if "sample_count" in sweeps:
        spec = sweeps["sample_count"]
        counts = spec.get("counts") or sorted(
            {max(1, len(indices) // 2), len(indices)}
        )
        curve = evaluation.sample_count_sweep(
            models, train_split, basis_full.truncate(m), cfg, indices,
            counts=counts, jobs=jobs,
        )
        _write_curve(report_dir / "sample_count.csv", curve, model_ids)

    if "clipping" in sweeps:
        result = evaluation.clipping_ablation(
            models, train_split, basis_full.truncate(m), cfg, indices, jobs=jobs
        )
        payload = dict(result.taus)
        payload["any_unclipped_escape"] = result.any_unclipped_escape
        payload["any_clipped_escape"] = result.any_clipped_escape
        (report_dir / "clipping.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True)
        )
    _echo_provenance(out_dir, config, [out_dir / "zoo" / "zoo.csv"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marginlab",
        description="Margin measurement and generalization-prediction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("dataset", "zoo", "measure", "evaluate", "sweep"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="JSON run configuration")
        cmd.add_argument("--out", help="output directory (overrides config)")
        cmd.add_argument("--seed", type=int, help="base seed (overrides config)")
        cmd.add_argument("--jobs", type=int, default=1, help="worker processes")
        cmd.add_argument(
            "--mode", help="comma-separated margin modes (overrides config)"
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {
            "out_dir": args.out,
            "seed": args.seed,
            "modes": args.mode.split(",") if args.mode else None,
        }
        config = load_config(args.config, overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "dataset":
            cmd_dataset(config)
        elif args.command == "zoo":
            cmd_zoo(config)
        elif args.command == "measure":
            cmd_measure(config, jobs=args.jobs)
        elif args.command == "evaluate":
            cmd_evaluate(config)
        elif args.command == "sweep":
            cmd_sweep(config, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except MarginLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

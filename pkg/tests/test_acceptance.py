"""Acceptance suite.

Every criterion prints one ``[PASS]``/``[FAIL]`` line (run with ``-s`` to
see them as they happen).  The reference experiment — four independently
seeded 24-model zoos on the annuli dataset — is trained once per session
and shared by the trend, sweep, contract, and plateau criteria.  Budget:
the whole suite targets well under 30 minutes on one desktop core.
"""

import json
import shutil
import subprocess
import time
from pathlib import Path

import numpy as np
import pytest

from marginlab.cli import main as cli_main
from marginlab.evaluation import (
    ZooModel,
    component_window_sweep,
    kendall_tau,
    sample_count_sweep,
)
from marginlab.manifold import (
    PrincipalBasis,
    fit_pca,
    jacobi_eigh,
    select_m_kneedle,
)
from marginlab.margin import (
    MarginConfig,
    constrained_taylor_margin,
    deepfool_margin,
    margin_distribution,
    select_sample_indices,
    taylor_margin,
)
from marginlab.net import Dense, Network, ReLU, make_mlp
from marginlab.train import (
    DatasetConfig,
    HyperParams,
    make_synthetic_dataset,
    train_model,
)

# ---------------------------------------------------------------------------
# Reference experiment parameters (frozen; mirrored by cli.DEFAULTS).

SEEDS = (0, 1, 2, 3)
DATASET = DatasetConfig(
    generator="annuli",
    ambient_dim=20,
    signal_dim=3,
    noise_std=0.01,
    train_samples=2000,
    test_samples=2000,
    num_classes=3,
)
GRID_DEPTH = (2, 3)
GRID_WIDTH = (32, 64)
GRID_NOISE = (0.0, 0.15, 0.3)
GRID_SUBSET = (150, 400)
LEARNING_RATE = 0.1
BATCH_SIZE = 16
SAMPLE_BUDGET = 500
SWEEP_BUDGET = 250
WINDOW = 4


def _report(name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}"
    if detail:
        line += f"  ({detail})"
    print(line, flush=True)
    assert ok, line


def _grid(seed: int) -> list[HyperParams]:
    points = []
    idx = 0
    for depth in GRID_DEPTH:
        for width in GRID_WIDTH:
            for noise in GRID_NOISE:
                for subset in GRID_SUBSET:
                    points.append(
                        HyperParams(
                            depth=depth,
                            width=width,
                            learning_rate=LEARNING_RATE,
                            batch_size=BATCH_SIZE,
                            weight_decay=0.0,
                            label_noise_fraction=noise,
                            train_subset_size=subset,
                            seed=seed * 10000 + idx,
                        )
                    )
                    idx += 1
    return points


@pytest.fixture(scope="session")
def reference():
    """Train the four reference zoos and collect everything the shared
    criteria need: per-mode mean margins, boundary-search records, window
    taus, and the sample-budget curve."""
    started = time.time()
    per_seed = []
    for seed in SEEDS:
        train_split, _ = make_synthetic_dataset(DATASET, seed=seed)
        basis_full = fit_pca(train_split.inputs)
        positive = basis_full.explained_variance[basis_full.explained_variance > 0]
        selection = select_m_kneedle(positive)
        basis = basis_full.truncate(selection.m)

        entries = [
            train_model(train_split, _, hp) for hp in _grid(seed)
        ]
        accuracies = np.array([e.test_accuracy for e in entries])
        models = [
            ZooModel(e.model_id, e.network, e.test_accuracy, e.gap,
                     {"depth": e.hyperparams.depth})
            for e in entries
        ]

        config = MarginConfig(sample_budget=SAMPLE_BUDGET)
        indices = select_sample_indices(train_split, SAMPLE_BUDGET, seed)
        records = []
        means = {}
        for mode, mode_basis in (
            ("input-taylor", None),
            ("constrained-deepfool", basis),
        ):
            summaries = [
                margin_distribution(
                    e.network, train_split, mode, config,
                    basis=mode_basis, sample_indices=indices,
                )
                for e in entries
            ]
            means[mode] = [s.mean for s in summaries]
            if mode == "constrained-deepfool":
                for s in summaries:
                    records.extend(s.records)

        window_curve = component_window_sweep(
            models, train_split, basis_full,
            MarginConfig(sample_budget=SWEEP_BUDGET), indices[:SWEEP_BUDGET],
            window=WINDOW, starts=[0, basis_full.m - WINDOW],
        )
        budget_curve = sample_count_sweep(
            models, train_split, basis, config, indices,
            counts=[SAMPLE_BUDGET // 2, SAMPLE_BUDGET],
        )

        per_seed.append({
            "seed": seed,
            "m": selection.m,
            "spread": float(accuracies.max() - accuracies.min()),
            "tau_input_taylor": kendall_tau(means["input-taylor"], accuracies),
            "tau_constrained_deepfool": kendall_tau(
                means["constrained-deepfool"], accuracies
            ),
            "records": records,
            "window_points": window_curve.points,
            "model_ids": [m.model_id for m in models],
            "budget_taus": [p.tau for p in budget_curve.points],
        })
    return {"seeds": per_seed, "elapsed": time.time() - started}


# ---------------------------------------------------------------------------
# Self-contained numeric criteria.


def _kink_distance(net: Network, x: np.ndarray) -> float:
    closest = np.inf
    value = net._prepare(x)
    for layer in net.layers:
        if isinstance(layer, ReLU):
            closest = min(closest, float(np.min(np.abs(value))))
        value = layer.forward(value)
    return closest


def test_gradient_finite_differences():
    """class_jacobian matches central finite differences on random nets."""
    started = time.time()
    rng = np.random.default_rng(2024)
    h = 1e-5
    checked = 0
    worst = 0.0
    nets = 0
    while nets < 20:
        input_dim = int(rng.integers(3, 7))
        hidden = [int(rng.integers(4, 9)) for _ in range(int(rng.integers(1, 4)))]
        num_classes = int(rng.integers(2, 5))
        net = make_mlp(input_dim, hidden, num_classes, rng)
        x = rng.normal(size=input_dim)
        if _kink_distance(net, x) < 1e-6:
            continue
        nets += 1
        jac = net.class_jacobian(x, at="input")
        for k in range(input_dim):
            plus, minus = x.copy(), x.copy()
            plus[k] += h
            minus[k] -= h
            if min(_kink_distance(net, plus), _kink_distance(net, minus)) < 1e-6:
                continue
            fd = (net.forward(plus) - net.forward(minus)) / (2 * h)
            scale = np.maximum(np.abs(fd), 1e-3)
            rel = float(np.max(np.abs(jac[:, k] - fd) / scale))
            worst = max(worst, rel)
            checked += 1
    elapsed = time.time() - started
    _report(
        "gradient matches finite differences",
        worst <= 1e-4 and checked > 0 and elapsed < 60,
        f"20 nets, {checked} columns, worst rel err {worst:.2e}, {elapsed:.1f}s",
    )


def _random_orthonormal(rng, m, n):
    mat = rng.normal(size=(n, m))
    q, _ = np.linalg.qr(mat)
    return q[:, :m].T


def test_linear_model_oracles():
    """All margin modes match closed-form distances on linear models."""
    started = time.time()
    rng = np.random.default_rng(7)
    exact = MarginConfig(
        learning_rate=0.25, tolerance=1e-12, max_iterations=100, clip=False,
        sample_budget=1,
    )
    worst = 0.0
    for _ in range(50):
        dim = int(rng.integers(3, 8))
        num_classes = int(rng.integers(2, 5))
        w = rng.normal(size=(num_classes, dim))
        b = rng.normal(size=num_classes)
        net = Network(layers=[Dense(w, b)], num_classes=num_classes,
                      input_shape=(dim,))
        x = rng.normal(size=dim)
        logits = net.forward(x)
        i = int(np.argmax(logits))
        m_sub = int(rng.integers(1, dim))
        basis_rows = _random_orthonormal(rng, m_sub, dim)
        basis = PrincipalBasis(
            components=basis_rows,
            explained_variance=np.ones(m_sub),
            total_variance=float(m_sub),
        )

        # First-order margins against every competitor hyperplane.
        for j in range(num_classes):
            if j == i:
                continue
            gap = logits[i] - logits[j]
            oracle = gap / np.linalg.norm(w[i] - w[j])
            worst = max(worst, abs(taylor_margin(net, x, i, j) - oracle))
            denom = np.linalg.norm(basis_rows @ (w[i] - w[j]))
            if denom > 1e-9:
                sub_oracle = gap / denom
                worst = max(
                    worst,
                    abs(constrained_taylor_margin(net, x, i, j, basis) - sub_oracle),
                )

        # Boundary search (binary restriction keeps the direction fixed, so
        # the closed-form hyperplane distance is the exact answer).
        if num_classes == 2:
            j = 1 - i
            gap = logits[i] - logits[j]
            oracle = gap / np.linalg.norm(w[i] - w[j])
            record = deepfool_margin(net, x, exact)
            worst = max(worst, abs(record.distance - oracle))
            denom = np.linalg.norm(basis_rows @ (w[i] - w[j]))
            if denom > 1e-9:
                record = deepfool_margin(net, x, exact, basis=basis)
                worst = max(worst, abs(record.distance - gap / denom))
    elapsed = time.time() - started
    _report(
        "linear-model margin oracles",
        worst <= 1e-6 and elapsed < 60,
        f"50 models, worst abs err {worst:.2e}, {elapsed:.1f}s",
    )


def test_pca_oracle():
    """Jacobi eigenpairs match numpy's symmetric eigensolver."""
    started = time.time()
    rng = np.random.default_rng(11)
    worst_value = 0.0
    worst_orth = 0.0
    worst_trace = 0.0
    worst_resid = 0.0
    for _ in range(30):
        dim = int(rng.integers(2, 21))
        factor = rng.normal(size=(dim + 5, dim))
        cov = factor.T @ factor / (dim + 5)
        values, vectors = jacobi_eigh(cov)
        ref = np.sort(np.linalg.eigvalsh(cov))[::-1]
        order = np.argsort(values)[::-1]
        values_sorted = values[order]
        vectors_sorted = vectors[:, order]
        worst_value = max(worst_value, float(np.max(np.abs(values_sorted - ref))))
        worst_orth = max(
            worst_orth,
            float(np.max(np.abs(vectors.T @ vectors - np.eye(dim)))),
        )
        worst_trace = max(
            worst_trace, abs(float(np.trace(cov)) - float(values.sum()))
        )
        worst_resid = max(
            worst_resid,
            float(
                np.max(
                    np.linalg.norm(
                        cov @ vectors_sorted - vectors_sorted * values_sorted,
                        axis=0,
                    )
                )
            ),
        )
    elapsed = time.time() - started
    ok = (
        worst_value <= 1e-8
        and worst_orth <= 1e-8
        and worst_trace <= 1e-8
        and worst_resid <= 1e-8
        and elapsed < 60
    )
    _report(
        "principal-component oracle",
        ok,
        f"30 matrices, value {worst_value:.2e} orth {worst_orth:.2e} "
        f"trace {worst_trace:.2e} resid {worst_resid:.2e}, {elapsed:.1f}s",
    )


def test_full_basis_equivalence():
    """Constrained modes with a full basis reproduce unconstrained modes."""
    rng = np.random.default_rng(23)
    train_split, test_split = make_synthetic_dataset(
        DatasetConfig("annuli", 8, 2, 0.05, 400, 200, 3), seed=5
    )
    hp = HyperParams(2, 24, 0.1, 16, 0.0, 0.0, 300, 99)
    entry = train_model(train_split, test_split, hp)
    basis_full = fit_pca(train_split.inputs)
    assert basis_full.m == train_split.inputs.shape[1]
    config = MarginConfig(sample_budget=40)
    indices = select_sample_indices(train_split, 40, 3)
    worst = 0.0
    for free, constrained in (
        ("input-taylor", "constrained-taylor"),
        ("input-deepfool", "constrained-deepfool"),
    ):
        a = margin_distribution(entry.network, train_split, free, config,
                                sample_indices=indices)
        b = margin_distribution(entry.network, train_split, constrained, config,
                                basis=basis_full, sample_indices=indices)
        values_a = np.array([r.distance for r in a.records])
        values_b = np.array([r.distance for r in b.records])
        assert len(values_a) == len(values_b)
        worst = max(worst, float(np.max(np.abs(values_a - values_b))))
    _report(
        "full-basis constrained modes equal unconstrained",
        worst <= 1e-10,
        f"worst per-sample gap {worst:.2e}",
    )


# ---------------------------------------------------------------------------
# Criteria over the shared reference experiment.


def test_boundary_search_contracts(reference):
    """Iterates stay on the subspace, inside bounds, with decreasing
    violation and bounded iteration counts, across every reference run."""
    records = [r for s in reference["seeds"] for r in s["records"]]
    span = max(r.max_span_residual for r in records)
    post_clip = max(r.max_post_clip_violation for r in records)
    monotone = all(r.violation_monotone for r in records)
    iterations = max(r.iterations for r in records)
    ok = span <= 1e-8 and post_clip == 0.0 and monotone and iterations <= 100
    _report(
        "boundary-search contracts",
        ok,
        f"{len(records)} runs, span {span:.2e}, post-clip {post_clip:.2e}, "
        f"monotone {monotone}, max iters {iterations}",
    )


def test_reference_zoo_trend(reference):
    """Subspace-restricted boundary-search margins out-rank plain
    first-order margins as generalization predictors."""
    passed = 0
    details = []
    for s in reference["seeds"]:
        tau_c = s["tau_constrained_deepfool"]
        tau_i = s["tau_input_taylor"]
        ok = tau_c > tau_i and tau_c >= 0.4 and s["spread"] >= 0.15
        passed += ok
        details.append(
            f"seed {s['seed']}: constrained {tau_c:+.3f} vs input {tau_i:+.3f}, "
            f"spread {s['spread']:.2f}"
        )
    elapsed = reference["elapsed"]
    _report(
        "reference-zoo trend",
        passed >= 3 and elapsed < 1800,
        f"{passed}/4 seeds, {elapsed:.0f}s total; " + "; ".join(details),
    )


def test_component_window_sweep(reference):
    """Rank correlation is higher for the leading component window than the
    trailing one, and per-model margins shrink toward the tail."""
    passed = 0
    details = []
    for s in reference["seeds"]:
        first, last = s["window_points"]
        decreasing = sum(
            first.per_model_means[mid] > last.per_model_means[mid]
            for mid in s["model_ids"]
        )
        ok = first.tau > last.tau and decreasing > len(s["model_ids"]) // 2
        passed += ok
        details.append(
            f"seed {s['seed']}: tau {first.tau:+.3f} vs {last.tau:+.3f}, "
            f"decreasing {decreasing}/{len(s['model_ids'])}"
        )
    _report(
        "component-window sweep",
        passed >= 3,
        f"{passed}/4 seeds; " + "; ".join(details),
    )


def test_sample_budget_plateau(reference):
    """Halving the per-model sample budget barely moves the rank score."""
    deltas = [abs(s["budget_taus"][1] - s["budget_taus"][0])
              for s in reference["seeds"]]
    worst = max(deltas)
    _report(
        "sample-budget plateau",
        worst <= 0.1,
        "deltas " + ", ".join(f"{d:.3f}" for d in deltas),
    )


# ---------------------------------------------------------------------------
# Pipeline determinism.

_SMALL_CONFIG = {
    "seed": 0,
    "dataset": {
        "generator": "annuli",
        "ambient_dim": 6,
        "signal_dim": 2,
        "noise_std": 0.05,
        "train_samples": 150,
        "test_samples": 100,
        "num_classes": 2,
    },
    "zoo": {"grid": {
        "depth": [1, 2],
        "width": [8],
        "batch_size": [16],
        "label_noise_fraction": [0.0, 0.3],
        "train_subset_size": [80],
    }},
    "margin": {"sample_budget": 30, "max_iterations": 40},
    "sweeps": {
        "component_window": {"window": 2, "starts": [0, 4]},
        "m_sweep": {"m_range": [1, 2]},
        "sample_count": {"counts": [15, 30]},
        "clipping": {},
    },
}


def _run_pipeline(out_dir: Path, jobs: int = 1) -> None:
    config = dict(_SMALL_CONFIG)
    config["out_dir"] = str(out_dir)
    config_path = out_dir.parent / f"{out_dir.name}.json"
    config_path.write_text(json.dumps(config))
    for command in ("dataset", "zoo", "measure", "evaluate", "sweep"):
        args = [command, "--config", str(config_path)]
        if command in ("measure", "sweep"):
            args += ["--jobs", str(jobs)]
        assert cli_main(args) == 0, command


def _tree_bytes(root: Path, subdir: str) -> dict[str, bytes]:
    base = root / subdir
    return {
        str(p.relative_to(base)): p.read_bytes()
        for p in sorted(base.rglob("*")) if p.is_file()
    }


def test_pipeline_determinism(tmp_path):
    """Identical configs give byte-identical reports; worker count is
    invisible in the artifacts."""
    _run_pipeline(tmp_path / "a")
    _run_pipeline(tmp_path / "b")
    _run_pipeline(tmp_path / "c", jobs=3)
    reports = [_tree_bytes(tmp_path / name, "report") for name in ("a", "b", "c")]
    margins = [_tree_bytes(tmp_path / name, "margins") for name in ("a", "b", "c")]
    repeat_ok = reports[0] == reports[1] and margins[0] == margins[1]
    jobs_ok = reports[0] == reports[2] and margins[0] == margins[2]
    _report(
        "pipeline determinism",
        repeat_ok and jobs_ok,
        f"repeat identical {repeat_ok}, jobs 3 identical {jobs_ok}",
    )


# ---------------------------------------------------------------------------
# Exporter interoperability.


def test_exporter_round_trip(tmp_path):
    """Models and datasets emitted by the TypeScript exporter load here and
    reproduce the exporter's own forward pass."""
    from marginlab.net import load_network
    from marginlab.tensorio import file_checksum, load_dataset, read_tensor

    cli = Path(__file__).resolve().parents[1] / "exporter" / "dist" / "cli.js"
    node = shutil.which("node")
    if node is None:
        _report("exporter round trip", False, "node unavailable")
    if not cli.exists():
        subprocess.run(["npx", "tsc", "-p", "tsconfig.json"],
                       cwd=cli.parents[1], check=True)

    rng = np.random.default_rng(31)
    model_source = {
        "num_classes": 3,
        "input_shape": [5],
        "layers": [
            {"kind": "dense",
             "weight": rng.normal(size=(6, 5)).tolist(),
             "bias": rng.normal(size=6).tolist()},
            {"kind": "relu"},
            {"kind": "dense",
             "weight": rng.normal(size=(3, 6)).tolist(),
             "bias": rng.normal(size=3).tolist()},
        ],
    }
    (tmp_path / "model.json").write_text(json.dumps(model_source))
    subprocess.run(
        [node, str(cli), "export-model", "--in", str(tmp_path / "model.json"),
         "--out", str(tmp_path / "bundle"), "--name", "m"],
        check=True, capture_output=True,
    )
    net = load_network(tmp_path / "bundle" / "m_model.json")
    check_input = read_tensor(tmp_path / "bundle" / "m_check_input.mpt")
    expected = read_tensor(tmp_path / "bundle" / "m_check_logits.mpt")
    logit_err = float(np.max(np.abs(net.forward(check_input) - expected)))

    inputs = rng.normal(size=(12, 4))
    labels = rng.integers(0, 3, size=12)
    dataset_source = {
        "inputs": inputs.tolist(),
        "labels": labels.tolist(),
        "num_classes": 3,
    }
    (tmp_path / "dataset.json").write_text(json.dumps(dataset_source))
    subprocess.run(
        [node, str(cli), "export-dataset", "--in", str(tmp_path / "dataset.json"),
         "--out", str(tmp_path / "bundle"), "--name", "d"],
        check=True, capture_output=True,
    )
    split = load_dataset(tmp_path / "bundle" / "d_manifest.json")
    checksums = json.loads((tmp_path / "bundle" / "d_checksums.json").read_text())
    sums_ok = all(
        file_checksum(tmp_path / "bundle" / name) == digest
        for name, digest in checksums.items()
    )
    _report(
        "exporter round trip",
        logit_err <= 1e-5 and split.num_samples == 12 and sums_ok,
        f"logit err {logit_err:.2e}, dataset rows {split.num_samples}, "
        f"checksums {sums_ok}",
    )

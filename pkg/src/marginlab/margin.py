"""Margin measurements: first-order (Taylor) input margins, their
subspace-constrained counterparts, the iterative constrained boundary
search with bound clipping, and hidden-representation margins.

All distances are L2.  A sample only contributes when it is correctly
classified; samples whose boundary is unreachable inside the constrained
subspace are skipped and counted, never assigned infinite margin.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DegenerateDirectionError,
    NumericError,
    SubspaceUnreachableError,
)
from .manifold import PrincipalBasis, lift_step, project_gradient
from .net import Network
from .tensorio import DatasetSplit

DEGENERATE_NORM = 1e-12

MODES = (
    "input-taylor",
    "input-deepfool",
    "constrained-taylor",
    "constrained-deepfool",
    "hidden-taylor",
)


@dataclass
class MarginConfig:
    learning_rate: float = 0.25
    tolerance: float = 0.01
    max_iterations: int = 100
    clip: bool = True
    sample_budget: int = 5000

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.tolerance <= 0:
            raise DataError("learning rate and tolerance must be positive")
        if self.max_iterations < 1 or self.sample_budget < 1:
            raise DataError("max iterations and sample budget must be >= 1")


@dataclass
class MarginRecord:
    """Result of one per-sample boundary search."""

    sample_index: int
    true_class: int
    competitor_class: int
    distance: float
    violation: float
    iterations: int
    terminated_by: str  # tolerance | violation_increase | max_iterations | first_order
    clipped: bool
    # Search diagnostics used by the invariant suite.
    max_span_residual: float = 0.0
    max_bound_violation: float = 0.0
    first_violation: float = float("inf")
    max_post_clip_violation: float = 0.0
    violation_monotone: bool = True


def _check_pair(net: Network, logits: np.ndarray, i: int, j: int) -> None:
    if i == j:
        raise DataError("competitor class must differ from the true class")
    if not 0 <= i < net.num_classes or not 0 <= j < net.num_classes:
        raise DataError("class index out of range")
    if int(np.argmax(logits)) != i:
        raise DataError("sample is not classified as the stated true class")


def taylor_margin(net: Network, x: np.ndarray, i: int, j: int) -> float:
    """First-order margin between classes i and j in input space."""
    logits = net.forward(x)
    _check_pair(net, logits, i, j)
    jac = net.class_jacobian(x, at="input")
    denom = np.linalg.norm(jac[i] - jac[j])
    if denom < DEGENERATE_NORM:
        raise DegenerateDirectionError("gradient difference is numerically zero")
    return float((logits[i] - logits[j]) / denom)


def constrained_taylor_margin(
    net: Network, x: np.ndarray, i: int, j: int, basis: PrincipalBasis
) -> float:
    """First-order margin with the search direction restricted to span(P)."""
    logits = net.forward(x)
    _check_pair(net, logits, i, j)
    jac = net.class_jacobian(x, at="input")
    denom = np.linalg.norm(project_gradient(basis, jac[i] - jac[j]))
    if denom < DEGENERATE_NORM:
        raise SubspaceUnreachableError("boundary unreachable in subspace")
    return float((logits[i] - logits[j]) / denom)


def hidden_taylor_margin(
    net: Network, x: np.ndarray, i: int, j: int, layer_index: int
) -> float:
    """First-order margin measured at a hidden boundary's post-activation output."""
    logits = net.forward(x)
    _check_pair(net, logits, i, j)
    jac = net.class_jacobian(x, at=layer_index)
    denom = np.linalg.norm(jac[i] - jac[j])
    if denom < DEGENERATE_NORM:
        raise DegenerateDirectionError("hidden gradient difference is numerically zero")
    return float((logits[i] - logits[j]) / denom)


def deepfool_margin(
    net: Network,
    x: np.ndarray,
    config: MarginConfig,
    basis: PrincipalBasis | None = None,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
    sample_index: int = -1,
) -> MarginRecord:
    """Iterative boundary search; constrained to span(P) when a basis is given.

    Each iteration linearizes every competitor boundary (in subspace
    coordinates when constrained), steps toward the nearest one with the
    configured learning rate, optionally clips to the per-feature bounds,
    and stops once the equality violation rises or the distance change
    falls below the tolerance.
    """
    config.validate()
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    logits = net.forward(x)
    i = int(np.argmax(logits))
    if config.clip and bounds is None:
        raise DataError("clipping requested but no bounds supplied")
    x_hat = x.copy()
    d_best = 0.0
    v_best = float("inf")
    best_competitor = -1
    iterations = 0
    terminated = "max_iterations"
    clipped = False
    max_span_residual = 0.0
    max_bound_violation = 0.0
    first_violation = float("inf")
    max_post_clip_violation = 0.0
    violation_monotone = True
    # Clipping may push the iterate off span(P); accumulate those displacements
    # so the in-span residual of later iterates can be checked exactly.
    clip_accum = np.zeros_like(x)

    for _ in range(config.max_iterations):
        cur_logits = net.forward(x_hat)
        jac = net.class_jacobian(x_hat, at="input")
        gaps = np.zeros(net.num_classes)
        width = basis.m if basis is not None else x.size
        w = np.zeros((net.num_classes, width))
        for j in range(net.num_classes):
            if j == i:
                continue
            gaps[j] = cur_logits[i] - cur_logits[j]
            gdiff = jac[i] - jac[j]
            w[j] = project_gradient(basis, gdiff) if basis is not None else gdiff
        norms = np.linalg.norm(w, axis=1)
        ratios = {
            j: abs(gaps[j]) / norms[j]
            for j in range(net.num_classes)
            if j != i and norms[j] >= DEGENERATE_NORM
        }
        if not ratios:
            raise SubspaceUnreachableError("boundary unreachable in subspace")
        l = min(ratios, key=lambda j: (ratios[j], j))

        # Step toward the linearized boundary of the nearest competitor.  The
        # descent direction reduces the class gap f_i - f_l; magnitude is the
        # first-order distance |gap| / ||w||.
        step = (abs(gaps[l]) / norms[l] ** 2) * w[l]
        step_input = lift_step(basis, step) if basis is not None else step
        x_hat = x_hat - config.learning_rate * step_input
        if not np.all(np.isfinite(x_hat)):
            raise NumericError("non-finite iterate in boundary search")
        if basis is not None:
            offset = x_hat - x - clip_accum
            residual = offset - lift_step(basis, project_gradient(basis, offset))
            max_span_residual = max(max_span_residual, float(np.linalg.norm(residual)))
        if bounds is not None:
            below = bounds[0] - x_hat
            above = x_hat - bounds[1]
            overshoot = max(float(below.max(initial=0.0)), float(above.max(initial=0.0)))
            if config.clip:
                if overshoot > 0.0:
                    clipped = True
                pre_clip = x_hat
                x_hat = np.clip(x_hat, bounds[0], bounds[1])
                clip_accum = clip_accum + (x_hat - pre_clip)
                post_below = float((bounds[0] - x_hat).max(initial=0.0))
                post_above = float((x_hat - bounds[1]).max(initial=0.0))
                max_post_clip_violation = max(
                    max_post_clip_violation, post_below, post_above
                )
            else:
                max_bound_violation = max(max_bound_violation, overshoot)

        v = abs(float(gaps[l]))
        d = float(np.linalg.norm(x - x_hat))
        if iterations == 0:
            first_violation = v
        if v >= v_best or abs(d - d_best) < config.tolerance:
            terminated = "violation_increase" if v >= v_best else "tolerance"
            break
        if v >= v_best:
            violation_monotone = False
        v_best = v
        d_best = d
        best_competitor = l
        iterations += 1

    return MarginRecord(
        sample_index=sample_index,
        true_class=i,
        competitor_class=best_competitor if best_competitor >= 0 else l,
        distance=d_best,
        violation=v_best,
        iterations=iterations,
        terminated_by=terminated,
        clipped=clipped,
        max_span_residual=max_span_residual,
        max_bound_violation=max_bound_violation,
        first_violation=first_violation,
        max_post_clip_violation=max_post_clip_violation,
        violation_monotone=violation_monotone,
    )


def select_sample_indices(dataset: DatasetSplit, budget: int, seed: int) -> np.ndarray:
    """Fixed shuffled sample-index list shared by every model on a dataset."""
    if budget < 1:
        raise DataError("sample budget must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5A4D])))
    order = rng.permutation(dataset.num_samples)
    return order[: min(budget, dataset.num_samples)]


def hidden_layer_variances(
    net: Network, dataset: DatasetSplit, sample_indices: np.ndarray
) -> list[float]:
    """Total feature variance (sum of per-unit variances) per hidden boundary."""
    stacks: list[list[np.ndarray]] = [[] for _ in net.hidden_boundaries]
    for idx in sample_indices:
        _, activations = net.forward_with_activations(dataset.inputs[idx])
        for pos, act in enumerate(activations):
            stacks[pos].append(act.reshape(-1))
    return [float(np.var(np.stack(s, axis=0), axis=0).sum()) for s in stacks]


@dataclass
class MarginSummary:
    mode: str
    mean: float
    median: float
    used: int
    skipped_misclassified: int
    skipped_unreachable: int
    records: list[MarginRecord] = field(default_factory=list)


def _taylor_nearest(logits, jac, i, basis=None):
    """Min over competitors of the (optionally projected) first-order margin."""
    best = None
    best_j = -1
    for j in range(len(logits)):
        if j == i:
            continue
        gdiff = jac[i] - jac[j]
        denom = np.linalg.norm(
            project_gradient(basis, gdiff) if basis is not None else gdiff
        )
        if denom < DEGENERATE_NORM:
            continue
        value = float((logits[i] - logits[j]) / denom)
        if best is None or value < best:
            best, best_j = value, j
    return best, best_j


def margin_distribution(
    net: Network,
    dataset: DatasetSplit,
    mode: str,
    config: MarginConfig,
    basis: PrincipalBasis | None = None,
    layers: list[int] | None = None,
    sample_indices: np.ndarray | None = None,
) -> MarginSummary:
    """Margin statistics for one model over a fixed shared sample list."""
    if mode not in MODES:
        raise DataError(f"unknown margin mode {mode!r}")
    if mode.startswith("constrained") and basis is None:
        raise DataError(f"mode {mode} needs a principal basis")
    config.validate()
    if sample_indices is None:
        sample_indices = np.arange(min(config.sample_budget, dataset.num_samples))
    else:
        sample_indices = np.asarray(sample_indices)[: config.sample_budget]

    layer_variances = None
    if mode == "hidden-taylor":
        if layers is None:
            layers = [0]
        for layer in layers:
            if not 0 <= layer < len(net.hidden_boundaries):
                raise DataError(f"hidden boundary {layer} out of range")
        if not layers:
            raise DataError("hidden-taylor mode needs at least one layer")
        layer_variances = hidden_layer_variances(net, dataset, sample_indices)
        for layer in layers:
            if layer_variances[layer] < DEGENERATE_NORM:
                raise NumericError(f"hidden layer {layer} has zero feature variance")

    values: list[float] = []
    records: list[MarginRecord] = []
    misclassified = 0
    unreachable = 0
    bounds = (dataset.lower, dataset.upper)

    for idx in sample_indices:
        idx = int(idx)
        x = dataset.inputs[idx]
        logits = net.forward(x)
        i = int(np.argmax(logits))
        if i != int(dataset.labels[idx]):
            misclassified += 1
            continue
        if mode in ("input-deepfool", "constrained-deepfool"):
            try:
                record = deepfool_margin(
                    net,
                    x,
                    config,
                    basis=basis if mode == "constrained-deepfool" else None,
                    bounds=bounds,
                    sample_index=idx,
                )
            except SubspaceUnreachableError:
                unreachable += 1
                continue
            values.append(record.distance)
            records.append(record)
        elif mode == "hidden-taylor":
            per_layer = []
            for layer in layers:
                jac = net.class_jacobian(x, at=layer)
                value, _ = _taylor_nearest(logits, jac, i)
                if value is None:
                    break
                per_layer.append(value / layer_variances[layer])
            if len(per_layer) != len(layers):
                unreachable += 1
                continue
            value = float(np.mean(per_layer))
            values.append(value)
            records.append(MarginRecord(idx, i, -1, value, 0.0, 0, "first_order", False))
        else:
            jac = net.class_jacobian(x, at="input")
            value, j = _taylor_nearest(
                logits, jac, i, basis if mode == "constrained-taylor" else None
            )
            if value is None:
                unreachable += 1
                continue
            values.append(value)
            records.append(MarginRecord(idx, i, j, value, 0.0, 0, "first_order", False))

    if not values:
        raise NumericError("no usable samples for margin distribution")
    return MarginSummary(
        mode=mode,
        mean=float(np.mean(values)),
        median=float(np.median(values)),
        used=len(values),
        skipped_misclassified=misclassified,
        skipped_unreachable=unreachable,
        records=records,
    )


_RECORD_COLUMNS = (
    "sample_index",
    "mode",
    "i",
    "j",
    "distance",
    "violation",
    "iterations",
    "terminated_by",
    "clipped",
)


def write_margin_records(path: str | Path, mode: str, records: list[MarginRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_RECORD_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.sample_index,
                    mode,
                    r.true_class,
                    r.competitor_class,
                    repr(r.distance),
                    repr(r.violation),
                    r.iterations,
                    r.terminated_by,
                    int(r.clipped),
                ]
            )

"""Scoring complexity measures against a model zoo: tie-corrected Kendall
rank correlation, a pairwise-sign conditional-mutual-information score, and
the sweep experiments (component windows, subspace size, sample budget,
clipping ablation).

The CMI score is this package's fixed definition: for every nonempty subset
of at most two hyperparameter types, model pairs sharing the subset's values
are pooled per conditioning cell; mutual information between the signs of
the pairwise measure and gap differences is aggregated weighted by pair
count, normalized by the matching conditional entropy of the gap sign, and
the final score is the minimum over subsets, scaled by 100.  Tied pairs
(zero difference in either variable) are dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import stats

from .errors import ConfigError, DataError, NumericError
from .manifold import PrincipalBasis
from .margin import MarginConfig, MarginSummary, margin_distribution
from .net import Network
from .tensorio import DatasetSplit


def kendall_tau(a, b) -> float:
    """Tie-corrected (tau-b) Kendall rank correlation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError("kendall_tau needs two equal-length 1-D sequences")
    if a.size < 2:
        raise DataError("kendall_tau needs at least 2 observations")
    tau = stats.kendalltau(a, b, variant="b").statistic
    if not np.isfinite(tau):
        raise NumericError("kendall tau undefined (an argument is fully tied)")
    return float(tau)


@dataclass
class MeasureSeries:
    """Per-model complexity-measure values aligned with zoo metadata."""

    model_ids: list[str]
    values: np.ndarray
    gaps: np.ndarray
    test_accuracies: np.ndarray
    hyperparams: dict[str, list]  # hyperparameter type -> per-model values

    def validate(self) -> None:
        n = len(self.model_ids)
        if len(set(self.model_ids)) != n:
            raise DataError("duplicate model ids in measure series")
        if len(self.values) != n or len(self.gaps) != n:
            raise DataError("series lengths disagree")
        if not np.all(np.isfinite(self.values)):
            raise DataError("non-finite measure values")
        for key, column in self.hyperparams.items():
            if len(column) != n:
                raise DataError(f"hyperparameter column {key} misaligned")


def _pair_sign_table(values, gaps, members):
    """Counts over pairs of sign(dv), sign(dg) in {-1, +1}; ties dropped."""
    counts = {(-1, -1): 0, (-1, 1): 0, (1, -1): 0, (1, 1): 0}
    for a, b in combinations(members, 2):
        dv = values[a] - values[b]
        dg = gaps[a] - gaps[b]
        if dv == 0.0 or dg == 0.0:
            continue
        counts[(int(math.copysign(1, dv)), int(math.copysign(1, dg)))] += 1
    return counts


def _mi_and_entropy(counts):
    total = sum(counts.values())
    if total == 0:
        return 0.0, 0.0, 0
    px = {s: (counts[(s, -1)] + counts[(s, 1)]) / total for s in (-1, 1)}
    py = {s: (counts[(-1, s)] + counts[(1, s)]) / total for s in (-1, 1)}
    mi = 0.0
    for (sx, sy), c in counts.items():
        if c == 0:
            continue
        p = c / total
        mi += p * math.log2(p / (px[sx] * py[sy]))
    entropy = -sum(p * math.log2(p) for p in py.values() if p > 0)
    return max(mi, 0.0), entropy, total


def cmi_score(series: MeasureSeries) -> float:
    """Minimum over hyperparameter-conditioned normalized MI, scaled by 100."""
    series.validate()
    hp_types = sorted(series.hyperparams)
    if len(hp_types) < 2:
        raise DataError("cmi_score needs at least 2 hyperparameter types")
    n = len(series.model_ids)
    subsets = [frozenset([t]) for t in hp_types] + [
        frozenset(pair) for pair in combinations(hp_types, 2)
    ]
    scores = []
    any_pairs = False
    for omega in subsets:
        keys = sorted(omega)
        cells: dict[tuple, list[int]] = {}
        for idx in range(n):
            cell = tuple(series.hyperparams[k][idx] for k in keys)
            cells.setdefault(cell, []).append(idx)
        weighted_mi = 0.0
        weighted_entropy = 0.0
        for members in cells.values():
            if len(members) < 2:
                continue
            counts = _pair_sign_table(series.values, series.gaps, members)
            mi, entropy, total = _mi_and_entropy(counts)
            weighted_mi += total * mi
            weighted_entropy += total * entropy
            if total > 0:
                any_pairs = True
        if weighted_entropy > 0.0:
            scores.append(100.0 * weighted_mi / weighted_entropy)
        else:
            # The gap sign carries no information in any cell; this subset
            # contributes the minimal possible score.
            scores.append(0.0)
    if not any_pairs:
        raise DataError("no conditioning cell holds enough untied pairs")
    return float(min(scores))


@dataclass
class SweepPoint:
    parameter: float
    tau: float
    per_model_means: dict[str, float] = field(default_factory=dict)
    flagged: bool = False


@dataclass
class SweepCurve:
    label: str
    points: list[SweepPoint]
    annotations: dict = field(default_factory=dict)


@dataclass
class ZooModel:
    """A trained model paired with its recorded accuracy, ready for sweeps."""

    model_id: str
    network: Network
    test_accuracy: float
    gap: float
    hyperparams: dict


def _mode_summaries(
    models: list[ZooModel],
    dataset: DatasetSplit,
    mode: str,
    config: MarginConfig,
    basis: PrincipalBasis | None,
    sample_indices,
    jobs: int = 1,
) -> dict[str, MarginSummary]:
    tasks = [
        (model.model_id, model.network, dataset, mode, config, basis, sample_indices)
        for model in models
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_summary_task, tasks))
    else:
        results = [_summary_task(task) for task in tasks]
    return dict(results)


def _summary_task(task):
    model_id, network, dataset, mode, config, basis, sample_indices = task
    summary = margin_distribution(
        network, dataset, mode, config, basis=basis, sample_indices=sample_indices
    )
    return model_id, summary


def _tau_against_accuracy(models: list[ZooModel], means: dict[str, float]) -> float:
    values = [means[m.model_id] for m in models]
    accuracies = [m.test_accuracy for m in models]
    return kendall_tau(values, accuracies)


def component_window_sweep(
    models: list[ZooModel],
    dataset: DatasetSplit,
    basis_full: PrincipalBasis,
    config: MarginConfig,
    sample_indices,
    window: int = 10,
    starts: list[int] | None = None,
    jobs: int = 1,
) -> SweepCurve:
    """Kendall tau of constrained boundary-search margins over sliding
    component windows of fixed width, from high to low explained variance."""
    if starts is None:
        starts = [s for s in range(0, basis_full.m - window + 1, window)]
    points = []
    for start in sorted(starts):
        if start < 0 or start + window > basis_full.m:
            raise ConfigError(f"window start {start} out of range")
        basis = basis_full.window(start, window)
        summaries = _mode_summaries(
            models, dataset, "constrained-deepfool", config, basis, sample_indices, jobs
        )
        means = {mid: s.mean for mid, s in summaries.items()}
        flagged = any(
            s.skipped_unreachable > (s.used + s.skipped_unreachable) / 2
            for s in summaries.values()
        )
        points.append(
            SweepPoint(
                parameter=float(start),
                tau=_tau_against_accuracy(models, means),
                per_model_means=means,
                flagged=flagged,
            )
        )
    return SweepCurve(label="component_window", points=points,
                      annotations={"window": window})


def m_sweep(
    models: list[ZooModel],
    dataset: DatasetSplit,
    basis_full: PrincipalBasis,
    config: MarginConfig,
    sample_indices,
    m_range: list[int],
    kneedle_m: int | None = None,
    jobs: int = 1,
) -> SweepCurve:
    """Tau as a function of subspace size, using first-order constrained margins."""
    points = []
    for m in sorted(m_range):
        if not 1 <= m <= basis_full.m:
            raise ConfigError(f"m={m} outside [1, {basis_full.m}]")
        basis = basis_full.truncate(m)
        summaries = _mode_summaries(
            models, dataset, "constrained-taylor", config, basis, sample_indices, jobs
        )
        means = {mid: s.mean for mid, s in summaries.items()}
        points.append(
            SweepPoint(parameter=float(m), tau=_tau_against_accuracy(models, means),
                       per_model_means=means)
        )
    return SweepCurve(label="m_sweep", points=points,
                      annotations={"kneedle_m": kneedle_m})


def sample_count_sweep(
    models: list[ZooModel],
    dataset: DatasetSplit,
    basis: PrincipalBasis,
    config: MarginConfig,
    sample_indices,
    counts: list[int],
    jobs: int = 1,
) -> SweepCurve:
    """Tau as a function of sample budget; budgets are nested prefixes of the
    shared shuffled index list."""
    sample_indices = np.asarray(sample_indices)
    points = []
    for count in sorted(counts):
        if count < 1 or count > len(sample_indices):
            raise ConfigError(f"sample count {count} out of range")
        summaries = _mode_summaries(
            models, dataset, "constrained-deepfool", config, basis,
            sample_indices[:count], jobs,
        )
        means = {mid: s.mean for mid, s in summaries.items()}
        points.append(
            SweepPoint(parameter=float(count), tau=_tau_against_accuracy(models, means),
                       per_model_means=means)
        )
    return SweepCurve(label="sample_count", points=points)


@dataclass
class ClippingAblation:
    taus: dict[str, float]  # (constrained|input) x (clipped|unclipped)
    any_unclipped_escape: bool
    any_clipped_escape: bool


def clipping_ablation(
    models: list[ZooModel],
    dataset: DatasetSplit,
    basis: PrincipalBasis,
    config: MarginConfig,
    sample_indices,
    jobs: int = 1,
) -> ClippingAblation:
    """Boundary-search taus with and without bound clipping, both variants."""
    from dataclasses import replace

    taus = {}
    any_unclipped_escape = False
    any_clipped_escape = False
    for variant, mode in (("constrained", "constrained-deepfool"),
                          ("input", "input-deepfool")):
        for clip in (True, False):
            cfg = replace(config, clip=clip)
            summaries = _mode_summaries(
                models, dataset, mode, cfg,
                basis if variant == "constrained" else None,
                sample_indices, jobs,
            )
            means = {mid: s.mean for mid, s in summaries.items()}
            taus[f"{variant}_{'clipped' if clip else 'unclipped'}"] = (
                _tau_against_accuracy(models, means)
            )
            for summary in summaries.values():
                for record in summary.records:
                    if clip:
                        if record.max_bound_violation > 0.0:
                            any_clipped_escape = True
                    elif record.max_bound_violation > 0.0:
                        any_unclipped_escape = True
    return ClippingAblation(
        taus=taus,
        any_unclipped_escape=any_unclipped_escape,
        any_clipped_escape=any_clipped_escape,
    )

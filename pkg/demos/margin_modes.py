"""Compare margin modes on one trained model.

Trains a single small classifier, fits the principal basis, and prints the
margin distribution under each mode: first-order estimates versus iterative
boundary search, unconstrained versus restricted to the leading subspace.

    python3 demos/margin_modes.py
"""

import numpy as np

from marginlab.manifold import fit_pca, select_m_kneedle
from marginlab.margin import MODES, MarginConfig, margin_distribution, select_sample_indices
from marginlab.train import DatasetConfig, HyperParams, make_synthetic_dataset, train_model

cfg = DatasetConfig("annuli", ambient_dim=10, signal_dim=2, noise_std=0.05,
                    train_samples=500, test_samples=500, num_classes=3)
train_split, test_split = make_synthetic_dataset(cfg, seed=0)

hp = HyperParams(depth=2, width=32, learning_rate=0.1, batch_size=16,
                 weight_decay=0.0, label_noise_fraction=0.0,
                 train_subset_size=300, seed=7)
entry = train_model(train_split, test_split, hp)
print(f"model {entry.model_id}: train acc {entry.train_accuracy:.3f}, "
      f"test acc {entry.test_accuracy:.3f}\n")

basis_full = fit_pca(train_split.inputs)
selection = select_m_kneedle(
    basis_full.explained_variance[basis_full.explained_variance > 0]
)
basis = basis_full.truncate(selection.m)
print(f"principal basis: kept {selection.m} of {basis_full.m} components")

mcfg = MarginConfig(sample_budget=100)
indices = select_sample_indices(train_split, mcfg.sample_budget, seed=0)
for mode in MODES:
    constrained = mode.startswith("constrained")
    summary = margin_distribution(
        entry.network, train_split, mode, mcfg,
        basis=basis if constrained else None, sample_indices=indices,
    )
    print(f"{mode:24s} mean {summary.mean:9.4f}  median {summary.median:9.4f}  "
          f"used {summary.used}  unreachable {summary.skipped_unreachable}")

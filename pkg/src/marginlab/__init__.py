"""marginlab: classification-margin measurement and generalization prediction
for small feedforward classifiers.

Capabilities: portable tensor/dataset/model serialization, exact forward
passes and reverse-mode class Jacobians, PCA subspace extraction with knee
selection, standard / subspace-constrained / hidden-layer margins, model-zoo
training, and rank-correlation / conditional-MI evaluation with sweep
experiments.
"""

from .errors import (
    ConfigError,
    DataError,
    DegenerateDirectionError,
    MarginLabError,
    NumericError,
    SubspaceUnreachableError,
    TensorFormatError,
)
from .manifold import (
    ComponentSelection,
    PrincipalBasis,
    fit_pca,
    lift_step,
    project_gradient,
    select_m_kneedle,
)
from .margin import (
    MarginConfig,
    MarginRecord,
    MarginSummary,
    constrained_taylor_margin,
    deepfool_margin,
    hidden_taylor_margin,
    margin_distribution,
    select_sample_indices,
    taylor_margin,
)
from .net import Network, load_network, make_mlp, save_network
from .tensorio import DatasetSplit, load_dataset, read_tensor, save_dataset, write_tensor
from .train import (
    DatasetConfig,
    HyperParams,
    ZooEntry,
    build_zoo,
    make_synthetic_dataset,
    train_model,
)
from .evaluation import (
    MeasureSeries,
    ZooModel,
    clipping_ablation,
    cmi_score,
    component_window_sweep,
    kendall_tau,
    m_sweep,
    sample_count_sweep,
)

__version__ = "0.1.0"

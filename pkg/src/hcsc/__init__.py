"""Hierarchical contrastive selective coding, desk scale.

Synthetic hierarchical datasets, a small MLP encoder with a momentum copy
and a negative queue, bottom-up hierarchical prototypes, Bernoulli
selection of negative pairs, selective contrastive losses with analytic
gradients, a deterministic training loop, and an evaluation harness.
"""

from .data import (
    AugmentationPolicy,
    Dataset,
    GeneratorSpec,
    Sample,
    augment,
    generate_hierarchical_mixture,
    load_dataset,
    save_dataset,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    MomentumState,
    NegativeQueue,
    ema_update,
    encoder_backward,
    encoder_forward,
    init_params,
)
from .errors import (
    ConfigurationError,
    ContractError,
    FormatError,
    HcscError,
    NumericError,
)
from .evaluation import (
    EvalConfig,
    KnnResult,
    clustering_agreement,
    knn_evaluate,
    linear_probe,
    negative_selection_diagnostics,
    prototype_label_ami,
)
from .hierarchy import (
    HierarchyOptions,
    KMeansResult,
    PrototypeTree,
    TreeBuilder,
    build_hierarchy,
    concentration,
    dump_tree,
    lloyd_kmeans,
    nearest_prototype,
)
from .losses import (
    LossOutput,
    LossWeights,
    hcsc_loss,
    icsc_loss,
    info_nce,
    pcsc_loss,
    proto_nce,
)
from .selection import (
    SelectionReport,
    cluster_similarity,
    instance_selection_prob,
    proto_selection_prob,
    select_instance_negatives,
    select_proto_negatives,
)
from .trainer import (
    TrainingConfig,
    TrainState,
    load_checkpoint,
    lr_schedule,
    run_training,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"

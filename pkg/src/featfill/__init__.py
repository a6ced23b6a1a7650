"""Feature backfilling toolkit.

Train an old-to-new feature alignment map with a variance head, order
gallery items for partial backfilling by predicted uncertainty, and
evaluate retrieval quality along the whole backfilling trajectory.
"""

from .alignment import (
    AlignNet,
    AlignmentResult,
    ClassifierHead,
    TrainConfig,
    predict_sigma,
    train_alignment,
    train_head,
    transform,
)
from .backfill import (
    BackfillPlan,
    BackfillReport,
    OrderingPolicy,
    backfill_curve,
    count_flips,
    kendall_tau,
    make_alpha_grid,
    make_ordering,
    partial_gallery,
    subgroup_gap_curve,
)
from .core import (
    ConfigError,
    FeatureRecord,
    FeatureSet,
    FormatError,
    PairedFeatureSet,
    SubgroupSpec,
    SyntheticWorld,
    SyntheticWorldConfig,
    generate_world,
    read_feature_set,
    write_feature_set,
)
from .losses import LossConfig, loss_combined, loss_disc, loss_l2, loss_uncertain
from .retrieval import (
    DISTANCE_KINDS,
    EvalStats,
    RetrievalResult,
    active_backend,
    cmc_top_k,
    evaluate,
    mean_average_precision,
    rank,
    use_backend,
)
from .tensornet import (
    DenseNet,
    Layer,
    LrSchedule,
    OptimizerState,
    Tape,
    TrainingError,
    adam_step,
    backward,
    forward,
    init_dense,
)

__version__ = "0.1.0"

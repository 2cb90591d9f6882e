"""Diffusion models whose classes share reverse-time dynamics along a
branch hierarchy: one denoising task per branch, discovered from how fast
class pairs blur into each other under forward diffusion.

The pieces compose left to right: discover a hierarchy from labeled data,
train a multi-task denoiser over its branches, then sample per class (or
all classes at once, reusing shared ancestor segments), build hybrids,
transmute objects between classes, and graft new classes onto a trained
model without disturbing what it already knows.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    TabularDataset,
    load_csv,
    load_idx_images,
    standardize,
    synth_gaussian_mixture,
)
from .diffusion import (
    DdpmSchedule,
    Perturbation,
    VpSde,
    perturb,
    prior_sample,
    score_target,
)
from .errors import (
    BranchDiffError,
    CheckpointError,
    DataError,
    DomainError,
    NumericError,
    ShapeError,
    StateError,
    UnknownClassError,
)
from .evaluation import (
    GaussianSummary,
    feature_correlations,
    frechet_distance,
    gaussian_fit,
    metrics_report,
    metrics_report_json,
    transmutation_correlation,
    wasserstein1_feature,
)
from .hierarchy import (
    Branch,
    BranchHierarchy,
    DistanceCurves,
    attach_class,
    branch_lookup,
    branch_score_distance,
    build_hierarchy,
    discover_hierarchy,
    format_branch_table,
    merge_times,
    pairwise_noisy_distances,
    random_hierarchy,
    smooth_curves,
)
from .models import LabelGuidedDenoiser, MultiTaskDenoiser, TimeEmbedding
from .rng import substream
from .sampling import (
    SampleBatch,
    SampleConfig,
    branch_cells,
    cached_step_ledger,
    ddpm_sample_class,
    hybrid,
    pc_step,
    sample_all_cached,
    sample_class,
    sample_from,
    transmute,
)
from .training import (
    LossRecord,
    TrainConfig,
    extend,
    extend_label_guided,
    loss_records_to_csv,
    train,
    train_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"

"""idmask: adversarial identity masks with an open-set evaluation protocol.

Typical flow: train or load an embedding model, fit a
:class:`TipImMasker` on substitute target images, transform the photos
you want to protect, and score the result with the benchmark harness.
"""

from .baselines import DiversityConfig, dim_protect, diversity_transform, mim_protect, mt_dim_protect
from .embedding import (
    LinearEmbedder,
    MlpEmbedder,
    TrainConfig,
    feature_distance,
    load_model,
    make_linear_model,
    save_model,
    train_mlp_model,
)
from .image_io import (
    ImageFileError,
    MalformedFileError,
    TensorFormatError,
    UnsupportedFormatError,
    read_image_file,
    read_tensor_file,
    write_image_file,
    write_tensor_file,
)
from .masking import (
    AttackConfig,
    MaskerState,
    TipImMasker,
    augment_to_batch,
    normalize_direction,
    project,
    protect_batch,
    protect_single,
    step,
)
from .metrics import psnr, ssim
from .objective import (
    identification_loss,
    identification_loss_grad,
    median_heuristic_bandwidths,
    mmd,
    mmd_grad,
    perturbation_scale_bandwidths,
    total_loss_and_grad,
)
from .protocol import (
    Benchmark,
    BenchmarkConfig,
    ProtectionReport,
    build_benchmark,
    build_synthetic_dataset,
    clean_identification_rate,
    rank_flags,
    run_batch_size_sweep,
    run_experiment,
    run_gamma_sweep,
    run_target_count_sweep,
)
from .selection import TargetSet, center_gain, gain, select_target
from .validation import IdentityMask, LabeledImage

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "Benchmark",
    "BenchmarkConfig",
    "DiversityConfig",
    "IdentityMask",
    "ImageFileError",
    "LabeledImage",
    "LinearEmbedder",
    "MalformedFileError",
    "MaskerState",
    "MlpEmbedder",
    "ProtectionReport",
    "TargetSet",
    "TensorFormatError",
    "TipImMasker",
    "TrainConfig",
    "UnsupportedFormatError",
    "augment_to_batch",
    "build_benchmark",
    "build_synthetic_dataset",
    "center_gain",
    "clean_identification_rate",
    "dim_protect",
    "diversity_transform",
    "feature_distance",
    "gain",
    "identification_loss",
    "identification_loss_grad",
    "load_model",
    "make_linear_model",
    "median_heuristic_bandwidths",
    "mim_protect",
    "mmd",
    "mmd_grad",
    "mt_dim_protect",
    "normalize_direction",
    "perturbation_scale_bandwidths",
    "project",
    "protect_batch",
    "protect_single",
    "psnr",
    "rank_flags",
    "read_image_file",
    "read_tensor_file",
    "run_batch_size_sweep",
    "run_experiment",
    "run_gamma_sweep",
    "run_target_count_sweep",
    "save_model",
    "select_target",
    "ssim",
    "step",
    "train_mlp_model",
    "write_image_file",
    "write_tensor_file",
]

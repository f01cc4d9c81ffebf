"""Adversarial attacks on hyperspectral patch classifiers.

Block-structured 3D input transformations plus a channel-weighted feature
distancing loss drive an iterative momentum attack whose examples transfer to
unseen models.  The package ships a small reverse-mode gradient engine, two
CNN classifiers with intermediate feature taps, the attack family (FGSM and
MI-FGSM baselines included), two input-processing defenses, accuracy metrics,
and a CLI for end-to-end experiments.
"""

from .attacks import (
    ATTACK_METHODS, AttackConfig, AttackTrace, BatchAttackResult,
    attack_batch, attack_example, fgsm, mi_fgsm,
)
from .autodiff import Tensor, finite_diff_grad
from .cube import (
    DataCube, LabelGrid, PatchSet, extract_patches, load_cube, load_labels,
    make_synthetic_scene, save_cube, save_labels, split,
)
from .defenses import (
    RandomNoiseDefense, SpectralSmoothingDefense, defend_noise, defend_spectral_filter,
)
from .losses import (
    ChannelStats, LossConfig, auxiliary_loss, channel_weights, feature_distance,
    total_loss,
)
from .metrics import ConfusionMatrix, EvaluationResult, evaluate
from .models import ARCHITECTURES, CNNClassifier, ModelSpec, load_model, save_model
from .transforms import (
    TRANSFORM_KINDS, BlockPartition, BlockRandomTransform, TransformRegistry,
    apply_blockwise, make_copies, random_partition,
)

__version__ = "0.1.0"

__all__ = [
    "ATTACK_METHODS", "ARCHITECTURES", "TRANSFORM_KINDS",
    "AttackConfig", "AttackTrace", "BatchAttackResult",
    "BlockPartition", "BlockRandomTransform", "CNNClassifier", "ChannelStats",
    "ConfusionMatrix", "DataCube", "EvaluationResult", "LabelGrid",
    "LossConfig", "ModelSpec", "PatchSet", "RandomNoiseDefense",
    "SpectralSmoothingDefense", "Tensor", "TransformRegistry",
    "attack_batch", "attack_example", "apply_blockwise", "auxiliary_loss",
    "channel_weights", "defend_noise", "defend_spectral_filter", "evaluate",
    "extract_patches", "feature_distance", "fgsm", "finite_diff_grad",
    "load_cube", "load_labels", "load_model", "make_copies",
    "make_synthetic_scene", "mi_fgsm", "random_partition", "save_cube",
    "save_labels", "save_model", "split", "total_loss",
]

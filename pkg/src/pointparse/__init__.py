"""Point-supervised scene parsing with cross-image metric learning.

A desk-scale training stack: synthetic scenes with dense ground truth,
a from-scratch per-pixel embedding network with exact gradients, point-wise
cross-entropy over sparse annotations, a cross-image triplet metric loss,
and online label extension - all deterministic and verifiable end to end.
"""

__version__ = "0.1.0"

from .grids import (
    IGNORE,
    Dataset,
    ImageGrid,
    PointAnnotationSet,
    PseudoMask,
    Sample,
    class_set,
    load_dataset,
    load_image,
    load_mask,
    load_points,
    mask_to_points,
    points_to_pseudo_mask,
    save_image,
    save_mask,
    save_points,
)
from .synth import SceneConfig, annotation_stats, generate_scene, make_dataset, sample_point_annotations, write_dataset
from .net import (
    ModelParams,
    NetConfig,
    backward,
    forward,
    forward_classifier,
    forward_features,
    init_params,
    load_checkpoint,
    numeric_grad_check,
    save_checkpoint,
)
from .pointce import EmptyMaskError, PointCEResult, dataset_objective, point_cross_entropy
from .triplet import (
    DistanceStats,
    EmbeddingPoint,
    EmbeddingSet,
    LossConfig,
    Triple,
    extract_embeddings,
    form_triples,
    negative_loss,
    positive_loss,
    subgroup_loss,
    triplet_loss,
)
from .extend import (
    extend_labels,
    extension_accuracy,
    kmeans_extension,
    merge_points,
    region_candidates,
    score_candidates,
)
from .evalmetrics import ConfusionMatrix, miou, per_class_iou, pixel_accuracy
from .train import (
    EpochLog,
    OptimizerState,
    TrainConfig,
    TrainResult,
    TrainingDivergedError,
    evaluate,
    make_subgroups,
    poly_lr,
    predict,
    sgd_step,
    train,
)

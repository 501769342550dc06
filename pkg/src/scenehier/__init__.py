"""Semantic-context label hierarchies and staged fine-tuning for scene labeling."""

from .data_model import (
    INFINITY,
    UNASSIGNED,
    UNLABELED,
    AggregationMatrix,
    ClassCatalog,
    DataError,
    Hyperparameters,
    LabeledImage,
    LabelHierarchy,
    TrainingSample,
    ValidatedDataset,
    validate_dataset,
)
from .hierarchy import (
    build_aggregation_matrix,
    build_labelmap_hierarchy,
    build_scene_name_hierarchy,
    choose_cluster_count,
    compute_label_histogram,
    kmeans,
    partition_classes,
)
from .ingestion import AugmentationConfig, Patch, augment_image, extract_patch, sample_centers
from .network import Model, build_default_model, forward, hierarchical_loss, softmax_ce
from .schedules import hierarchical_schedule, run_schedule, sequential_schedule

__version__ = "0.1.0"

__all__ = [
    "INFINITY",
    "UNASSIGNED",
    "UNLABELED",
    "AggregationMatrix",
    "AugmentationConfig",
    "ClassCatalog",
    "DataError",
    "Hyperparameters",
    "LabelHierarchy",
    "LabeledImage",
    "Model",
    "Patch",
    "TrainingSample",
    "ValidatedDataset",
    "augment_image",
    "build_aggregation_matrix",
    "build_default_model",
    "build_labelmap_hierarchy",
    "build_scene_name_hierarchy",
    "choose_cluster_count",
    "compute_label_histogram",
    "extract_patch",
    "forward",
    "hierarchical_loss",
    "hierarchical_schedule",
    "kmeans",
    "partition_classes",
    "run_schedule",
    "sample_centers",
    "sequential_schedule",
    "softmax_ce",
    "validate_dataset",
]

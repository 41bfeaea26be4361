"""Voxel features + implicit semantic head + instance/semantic consistency repair."""

from .types import (
    DEFAULT_TAXONOMY,
    IGNORE,
    STUFF,
    THING,
    BoundingBox7,
    ClassTaxonomy,
    LossWeights,
    PointCloud,
    box_contains,
    points_in_box,
)
from .voxel import FeatureMap, GridSpec, VoxelQueryEncoder, featurize
from .head import HeadParams, QueryBatch, head_forward, head_init, query_semantics, softmax
from .losses import SemanticLossConfig, lovasz_softmax, semantic_loss, total_loss, weighted_cross_entropy
from .ics import IcsLog, IcsParams, ics
from .panoptic import PanopticCloud, assign_instances
from .metrics import confusion_matrix, iou_metrics, panoptic_quality
from .synth import DetectionNoise, Scene, SceneConfig, generate_scene, generate_scenes, perturb_detections
from .trainer import ImplicitSemanticHead, TrainConfig, grad_check, train
from .config import Config, load_config

__version__ = "0.1.0"

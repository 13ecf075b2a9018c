"""Desk-scale query detector and the synthetic two-domain benchmark it trains on."""
from .evaluate import THRESHOLDS, GroundTruth, MapReport, Prediction, evaluate_map, mean_average_precision, predict
from .loss import Assignment, box_iou, detection_loss, match_predictions
from .model import DetectorConfig, DetectorOutput, ToyDetector, cxcywh_to_xyxy, detector_forward, xyxy_to_cxcywh
from .scenes import (CLASS_NAMES, DEFAULT_SHIFT, DomainShiftConfig, Scene, SceneConfig, generate_scene,
                     make_dataset, scene_seeds)
from .train import AlignSettings, Batch, LossBundle, TrainingError, TrainState, source_batch, target_batch, train_step

__all__ = [
    "THRESHOLDS", "GroundTruth", "MapReport", "Prediction", "evaluate_map", "mean_average_precision", "predict",
    "Assignment", "box_iou", "detection_loss", "match_predictions",
    "DetectorConfig", "DetectorOutput", "ToyDetector", "cxcywh_to_xyxy", "detector_forward", "xyxy_to_cxcywh",
    "CLASS_NAMES", "DEFAULT_SHIFT", "DomainShiftConfig", "Scene", "SceneConfig", "generate_scene",
    "make_dataset", "scene_seeds",
    "AlignSettings", "Batch", "LossBundle", "TrainingError", "TrainState", "source_batch", "target_batch",
    "train_step",
]

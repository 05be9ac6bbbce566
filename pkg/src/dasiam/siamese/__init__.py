"""Toy Siamese region-proposal tracker."""

from .anchors import AnchorGrid, cxcywh_to_xywh, decode, encode, iou_cxcywh, label_anchors, xywh_to_cxcywh
from .crops import crop_and_resize, template_side, to_input
from .losses import decode_boxes, tracking_loss
from .model import LEVELS, ModelConfig, RPNOutput, SiameseRPN, fg_probability, reg_deltas
from .pairs import TrainingPair, crop_pair, make_training_pair, sample_pair
from .tracker import SiameseTracker, TrackerConfig, TrackState, track_sequence

__all__ = [
    "AnchorGrid", "cxcywh_to_xywh", "decode", "encode", "iou_cxcywh", "label_anchors", "xywh_to_cxcywh",
    "crop_and_resize", "template_side", "to_input", "decode_boxes", "tracking_loss",
    "LEVELS", "ModelConfig", "RPNOutput", "SiameseRPN", "fg_probability", "reg_deltas",
    "TrainingPair", "crop_pair", "make_training_pair", "sample_pair",
    "SiameseTracker", "TrackerConfig", "TrackState", "track_sequence",
]

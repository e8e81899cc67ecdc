"""Weakly supervised dense video captioning: proposal decoding, distillation losses,
cross-modal matching, caption decoding and evaluation on desk-scale data."""

from .temporal import Interval, even_split, iou, rescale_features
from .proposals import ScoredProposal, TeacherOutput, decode, oracle_teacher_output, score_proposals, soft_nms, top_k

__all__ = [
    "Interval", "even_split", "iou", "rescale_features",
    "ScoredProposal", "TeacherOutput", "decode", "oracle_teacher_output",
    "score_proposals", "soft_nms", "top_k",
]

"""qtrack: tracking-by-detection for video text detection streams."""

from .association import AssociationOutcome, MemoryBank, TrackerConfig, associate_frame, nms, track_sequence
from .data_io import (
    BBox,
    DetectionFrame,
    DetectionRecord,
    GroundTruthTrack,
    StreamHeader,
    TrajectoryOutput,
    iou,
    parse_annotations,
    parse_detection_stream,
    read_trajectories,
    write_annotations,
    write_detection_stream,
    write_trajectories,
)
from .matcher import (
    AssociationMatrix,
    EmbeddingSet,
    MatcherParams,
    MatcherVariant,
    count_parameters,
    embed_queries,
    matcher_forward,
)
from .metrics import EvalConfig, MotReport, clear_mot, detection_prf, idf1
from .model import TrackerModel, load_checkpoint, save_checkpoint
from .rescoring import RescoringHead, ScoredInstance, filter_instances, fuse_scores, rescore
from .synth import SynthConfig, degrade_scores, generate_sequence
from .training import (
    LossConfig,
    TrainConfig,
    Video,
    assign_targets,
    hungarian_match,
    matching_cost,
    total_loss,
    train,
)

__version__ = "0.1.0"

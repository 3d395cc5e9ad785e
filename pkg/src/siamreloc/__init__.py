"""Twin-network camera pose regression with relative-pose and metric losses."""

from .dataset import Frame, Scene, SynthSceneConfig, generate_synth_splits, make_pairs
from .errors import SiamRelocError
from .evaluation import SceneResult, average_over_scenes, evaluate, evaluate_predictions
from .losses import COMBINATIONS, LossWeights, PairBatch, comprehensive_loss
from .network import EncoderConfig, SiameseNet
from .pose import Pose, angular_error_deg, relative_pose
from .trainer import TrainConfig, TrainReport, run_ablation, train

__all__ = [
    "COMBINATIONS",
    "EncoderConfig",
    "Frame",
    "LossWeights",
    "PairBatch",
    "Pose",
    "Scene",
    "SceneResult",
    "SiamRelocError",
    "SiameseNet",
    "SynthSceneConfig",
    "TrainConfig",
    "TrainReport",
    "average_over_scenes",
    "comprehensive_loss",
    "evaluate",
    "evaluate_predictions",
    "generate_synth_splits",
    "make_pairs",
    "relative_pose",
    "run_ablation",
    "train",
]

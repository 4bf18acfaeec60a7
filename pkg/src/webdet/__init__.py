"""Web-to-target transfer detection on synthetic proposal bags.

Three streams share one feature learner: a weakly supervised detection head
trained on web image labels, an instance-level adversarial domain classifier
with foreground attention, and chained self-training heads fed by pseudo
ground truth on the unlabeled target split.
"""

from .autodiff import Tensor, check_gradients, grad_reverse
from .bags import ProposalBag, load_bags, save_bags
from .datagen import GenConfig, generate
from .errors import (CheckpointError, ConfigError, DataFormatError, InputError,
                     ShapeError, TrainingError, WebdetError)
from .estimator import WebTransferDetector
from .metrics import EvalReport, evaluate, export_embedding
from .model import ModelParams, init_params
from .st import PseudoGroundTruth, make_pseudo_gt
from .trainer import (History, TrainConfig, load_checkpoint, save_checkpoint,
                      train, train_isolated)
from .wsd import ScoreBundle, forward_wsd, wsd_loss

__version__ = "0.1.0"

__all__ = [
    "Tensor", "check_gradients", "grad_reverse",
    "ProposalBag", "load_bags", "save_bags",
    "GenConfig", "generate",
    "WebdetError", "ShapeError", "InputError", "ConfigError", "DataFormatError",
    "TrainingError", "CheckpointError",
    "WebTransferDetector",
    "EvalReport", "evaluate", "export_embedding",
    "ModelParams", "init_params",
    "PseudoGroundTruth", "make_pseudo_gt",
    "History", "TrainConfig", "train", "train_isolated",
    "save_checkpoint", "load_checkpoint",
    "ScoreBundle", "forward_wsd", "wsd_loss",
    "__version__",
]

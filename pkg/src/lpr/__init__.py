"""Learning primitive relations (LPR) for compositional zero-shot learning."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import CompositionSpace, Dataset, FeatureRecord, SyntheticConfig, TextBank, generate_synthetic
from .evaluation import EvalReport, ScoreMatrix, bias_sweep, metrics
from .model import LprParams, forward_all
from .objective import FusionWeights, LossWeights, fuse, predict, total_loss
from .runner import TrainConfig, evaluate, hyperparameter_defaults, train

__version__ = "0.1.0"

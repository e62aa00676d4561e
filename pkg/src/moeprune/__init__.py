"""Calibration-free expert scoring and structural pruning for MoE checkpoints."""
from .checkpoint import Checkpoint, ModelConfig, ModelLayout, PRESETS, load_layout, open_model
from .scoring import (
    CRITERIA,
    ScoreTable,
    aimer_score,
    aimer_score_vec,
    hoyer_score,
    magnitude_score,
    random_scores,
    rank_layer,
    score_checkpoint,
)
from .tensor import ExpertTensors
from .calib import ToyDims, ToyMoeModel, collect_stats, gen_toy_model, make_batch
from .pruning import PruningPlan, apply_plan, make_plan, verify_pruned

__version__ = "0.1.0"

"""Training loops, metrics, ablations and configuration."""
from .config import ConfigError, RunConfig, load_config, parse_config
from .runner import (AblationReport, EvalReport, Model, TrainingAborted, TrainResult, eval_behavior, eval_map_fov,
                     eval_mae, eval_spherical_map, evaluate, load_model, predict, run_ablation, train)

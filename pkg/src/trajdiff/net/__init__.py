"""Track-token diffusion transformer."""
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .embed import bilinear_feature, frequency_ladder, position_encoding, sinusoidal_embed
from .model import (Cache, ModelParams, NumericError, backward, forward, init_params, param_count,
                    param_shapes)
from .tokens import CondBatch, NetConfig, TokenBatch, build_tokens, history_channels

__all__ = [
    "Cache", "Checkpoint", "CheckpointError", "CondBatch", "ModelParams", "NetConfig", "NumericError",
    "TokenBatch", "backward", "bilinear_feature", "build_tokens", "forward", "frequency_ladder",
    "history_channels", "init_params", "load_checkpoint", "param_count", "param_shapes",
    "position_encoding", "save_checkpoint", "sinusoidal_embed",
]

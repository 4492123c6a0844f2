"""Gridded coastal sea-element forecasting with 3D-encoder U-Nets."""
from .data import GridSeries, SplitSpec, WindowSpec, read_container, synth_generate, write_container
from .models import ARCHITECTURES, ModelConfig, build_model, count_params, forward, summarize
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "ARCHITECTURES", "GridSeries", "ModelConfig", "SplitSpec", "TrainConfig", "WindowSpec",
    "build_model", "count_params", "forward", "load_checkpoint", "read_container",
    "save_checkpoint", "summarize", "synth_generate", "train", "write_container",
]
__version__ = "0.1.0"

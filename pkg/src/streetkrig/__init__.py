"""Graph kriging of traffic counts: a diffusion graph convolutional network
trained with a masking strategy, with zero-inflated count likelihoods."""

__version__ = "0.1.0"

from .config import TrainConfig  # noqa: E402
from .dataio import Panel, ScaleRecord, SplitPlan, load_panel, make_split, synth_generate  # noqa: E402
from .graph import Graph, build_binary, build_distance, build_similarity, transitions  # noqa: E402
from .model import DGCN  # noqa: E402
from .trainer import ablation_run, train  # noqa: E402

__all__ = [
    "DGCN",
    "Graph",
    "Panel",
    "ScaleRecord",
    "SplitPlan",
    "TrainConfig",
    "ablation_run",
    "build_binary",
    "build_distance",
    "build_similarity",
    "load_panel",
    "make_split",
    "synth_generate",
    "train",
    "transitions",
]

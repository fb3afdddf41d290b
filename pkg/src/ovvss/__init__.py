"""Open-vocabulary video semantic segmentation, trainable end to end on
synthetic video without pretrained weights."""

__version__ = "0.1.0"

from .clipio import ClassVocabulary, VideoClipSample, load_dataset  # noqa: F401
from .config import PipelineConfig, TrainConfig, load_config  # noqa: F401
from .model import SegModel  # noqa: F401

"""Point-level weakly-supervised micro- and macro-expression spotting."""

from .config import RunConfig
from .tensors_io import (DatasetManifest, PointAnnotation, SynthConfig, VideoRecord, derive_video_labels,
                         load_video, synth_dataset, write_video)

__version__ = "0.1.0"

__all__ = ["RunConfig", "DatasetManifest", "PointAnnotation", "SynthConfig", "VideoRecord",
           "derive_video_labels", "load_video", "synth_dataset", "write_video"]

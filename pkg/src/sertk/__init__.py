"""Speech emotion recognition from mel-spectrogram images with vision transformers."""

__version__ = "0.1.0"

from . import errors, kernels  # noqa: F401
from .audio import EMOTIONS, AudioClip, DatasetManifest, ManifestEntry, load_manifest  # noqa: F401
from .melspec import MelParams, featurize, hz_to_mel, mel_to_hz  # noqa: F401
from .vit import ModelConfig, VisionTransformer, count_flops, preset  # noqa: F401

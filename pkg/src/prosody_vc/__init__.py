"""Recognition-synthesis voice conversion with a speaker-independent prosody code."""
from .config import ExperimentConfig, FeatureConfig, ModelConfig, PipelineConfig, TrainingConfig
from .features import MelSpectrogram, TextSequence, Waveform, detokenize, load_waveform, mel_spectrogram, tokenize
from .model import TransformerTTS, positional_encoding
from .prosody import gradient_reverse, adversarial_step, freeze_prosody_encoder
from .checkpoint import Checkpoint

__version__ = "0.1.0"

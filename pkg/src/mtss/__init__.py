"""Multi-task self-supervised pre-training for music audio representations."""

from .audio import Waveform, load_audio, save_audio, stft
from .data import Corpus, SynthSpec, generate_synthetic_corpus, read_manifest
from .downstream import Scenario, confusion_matrix, macro_f1, run_trials, train_downstream
from .encoder import PASE, PASE_PLUS, Encoder, EncoderConfig, default_config, desk_config
from .features import ExtractionSpec, Worker, extract_all, parse_workers
from .pretrain import Checkpoint, LossWeights, PretrainConfig, compute_reweights, run_pretraining, total_loss

__version__ = "0.1.0"

__all__ = [
    "Waveform", "load_audio", "save_audio", "stft",
    "Corpus", "SynthSpec", "generate_synthetic_corpus", "read_manifest",
    "Scenario", "confusion_matrix", "macro_f1", "run_trials", "train_downstream",
    "PASE", "PASE_PLUS", "Encoder", "EncoderConfig", "default_config", "desk_config",
    "ExtractionSpec", "Worker", "extract_all", "parse_workers",
    "Checkpoint", "LossWeights", "PretrainConfig", "compute_reweights", "run_pretraining", "total_loss",
]

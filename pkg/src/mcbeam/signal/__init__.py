from .features import FeatureSequence, delta_matrix, feature, filter_centers, log_fbank, mel_filterbank, normalize
from .stft import ComplexSpectrogram, Waveform, istft, magnitude, stft
from .wavio import read_wav, write_wav

__all__ = [
    "ComplexSpectrogram",
    "FeatureSequence",
    "Waveform",
    "delta_matrix",
    "feature",
    "filter_centers",
    "istft",
    "log_fbank",
    "magnitude",
    "mel_filterbank",
    "normalize",
    "read_wav",
    "stft",
    "write_wav",
]

"""Self-supervised JEPA pretraining for multichannel EEG signals."""

__version__ = "0.1.0"

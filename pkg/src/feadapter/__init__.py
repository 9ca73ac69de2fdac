"""Fbank front-end adaptation for waveform-pretrained speech encoders."""

__version__ = "0.1.0"

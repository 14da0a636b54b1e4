"""Desk-scale WiFi-CSI behavior recognition lab.

Pipeline: synthetic multipath CSI recordings -> antenna-ratio phase and
Doppler spectrogram images -> two-branch attention network with saliency
fusion -> cross-domain training/evaluation harness and CLI.
"""

__version__ = "0.1.0"

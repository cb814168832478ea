"""Simulator for modality incongruity in multimodal federated learning."""

__version__ = "0.1.0"

"""Saliency-map toolkit for a small convolutional speaker classifier.

Four class-activation-map algorithms over a from-scratch numpy CNN, plus
the two reliability audits used to compare them: deletion/insertion curves
with AUC scoring, and multi-speaker localization-and-recognition.
"""

from . import engine, model, training

__all__ = ["engine", "model", "training"]

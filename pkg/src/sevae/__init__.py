"""Situation-entity clause classification with a variational latent model.

Clause-level classifiers for seven situation entity types, built on a small
float64 autodiff core. The centerpiece is a variational model that encodes a
clause into a Gaussian latent, reconstructs the text, and predicts the label
from the same latent; four reference models (discriminative LSTM, class-
conditioned language model, latent-class language model, context-aware
clause tagger) share the data and training harness.
"""

__version__ = "0.1.0"

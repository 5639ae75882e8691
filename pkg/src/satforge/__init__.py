"""Embedding-conditioned (speaker-adaptive) frame classifiers on a synthetic corpus.

Modules: ``nn_core`` (numpy MLP engine), ``conditioning`` (shift/scale
mechanisms), ``synth_data`` (corpus and oracle embeddings), ``backends``
(speaker-verification scoring and EER), ``trainer`` (SI / SAT training) and
``cli``.
"""

__version__ = "0.1.0"

"""Prompt conditioning vectors.

The text-encoder stand-in: each prompt id maps to a frozen random column of
a matrix P with N(0, 1/c) entries, and an adaptation token adds to it,

    y = P . onehot(prompt_id) + u,

so a learned token embedding enters the conditioning vector additively and
u = 0 recovers the unadapted prompt.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .rng import stream

COND_DIM = 16
PROMPT_VOCAB = 8
_PROMPT_MATRIX_SEED = 715517  # frozen; changing it changes every prompt vector


@lru_cache(maxsize=None)
def _prompt_matrix_cached(cond_dim: int, vocab: int) -> np.ndarray:
    rng = stream(_PROMPT_MATRIX_SEED, "prompt-matrix", cond_dim, vocab)
    mat = rng.standard_normal((cond_dim, vocab)) / np.sqrt(cond_dim)
    mat.setflags(write=False)
    return mat


def prompt_matrix(cond_dim: int = COND_DIM, vocab: int = PROMPT_VOCAB) -> np.ndarray:
    """The frozen prompt matrix P of shape (cond_dim, vocab)."""
    if cond_dim < 1 or vocab < 1:
        raise ValueError("cond_dim and vocab must be positive")
    return _prompt_matrix_cached(cond_dim, vocab)


def base_conditioning(
    prompt_id: int, cond_dim: int = COND_DIM, vocab: int = PROMPT_VOCAB
) -> np.ndarray:
    """Conditioning vector of a bare prompt (token contribution zero)."""
    if not (0 <= prompt_id < vocab):
        raise ValueError(f"prompt_id must lie in [0, {vocab}), got {prompt_id}")
    return prompt_matrix(cond_dim, vocab)[:, prompt_id].copy()

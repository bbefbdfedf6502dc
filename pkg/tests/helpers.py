"""Shared random-fixture builders for the test suite."""

import numpy as np

from scribseg.core import Label, PseudoLabelMap, ScribbleMap


def random_probs(rng, shape=(8, 8), lo=0.02, hi=0.98):
    return rng.uniform(lo, hi, shape)


def random_scribbles(rng, shape=(8, 8), n_fg=3, n_bg=3) -> ScribbleMap:
    """Scribble map with n_fg + n_bg distinct stroke pixels."""
    total = shape[0] * shape[1]
    picks = rng.choice(total, size=n_fg + n_bg, replace=False)
    fg = np.zeros(total, dtype=bool)
    bg = np.zeros(total, dtype=bool)
    fg[picks[:n_fg]] = True
    bg[picks[n_fg:]] = True
    return ScribbleMap(fg.reshape(shape), bg.reshape(shape))


def random_pseudo(rng, shape=(8, 8), p_ignore=0.3) -> PseudoLabelMap:
    u = rng.uniform(size=shape)
    labels = np.where(u < p_ignore, Label.IGNORE,
                      np.where(u < p_ignore + (1 - p_ignore) / 2, Label.BG, Label.FG))
    return PseudoLabelMap(labels.astype(np.int8))


def random_tristate(rng, shape, p_ignore=0.25):
    u = rng.uniform(size=shape)
    return np.where(u < p_ignore, -1, (u > (1 + p_ignore) / 2).astype(int)).astype(np.int8)


def random_embeddings(rng, channels=4, shape=(8, 8), scale=1.0):
    """Gaussian embeddings, float64, re-drawn until every cell is nonzero."""
    z = rng.normal(scale=scale, size=(channels,) + shape)
    norms = np.linalg.norm(z.reshape(channels, -1), axis=0)
    while norms.min() == 0.0:
        z = rng.normal(scale=scale, size=(channels,) + shape)
        norms = np.linalg.norm(z.reshape(channels, -1), axis=0)
    return z

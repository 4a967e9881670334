"""Source-target pairing in AST-latent space."""

import numpy as np

from .errors import ConfigurationError


def _flat(latents):
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim < 2 or z.shape[0] == 0:
        raise ConfigurationError(f"expected a nonempty batch of latents, got shape {z.shape}")
    return z.reshape(z.shape[0], -1)


def distance_matrix(source, target):
    """(N_t, N_s) Euclidean distances between concatenated latents."""
    s, t = _flat(source), _flat(target)
    if s.shape[1] != t.shape[1]:
        raise ConfigurationError(f"latent width mismatch: source {s.shape[1]} vs target {t.shape[1]}")
    d2 = (t * t).sum(1)[:, None] + (s * s).sum(1)[None, :] - 2.0 * t @ s.T
    return np.sqrt(np.maximum(d2, 0.0))


def mine_pairs(source, target):
    """For every target j, the source index farthest from it in latent space.

    np.argmax returns the first maximum, so ties go to the smallest index.
    Returns a list of (i, j) with j = 0..N_t-1.
    """
    d = distance_matrix(source, target)
    return [(int(i), j) for j, i in enumerate(np.argmax(d, axis=1))]


def random_pairs(n_source, n_target, seed):
    """I.i.d. uniform source index for each target."""
    if n_source <= 0 or n_target <= 0:
        raise ConfigurationError("random_pairs needs n_source, n_target > 0")
    idx = np.random.default_rng([int(seed), 0xA1]).integers(0, n_source, size=n_target)
    return [(int(i), j) for j, i in enumerate(idx)]


def validate(pairs, n_source, n_target):
    js = sorted(j for _, j in pairs)
    if js != list(range(n_target)):
        raise ConfigurationError("pair set must cover every target index exactly once")
    if any(not 0 <= i < n_source for i, _ in pairs):
        raise ConfigurationError("source index out of range in pair set")

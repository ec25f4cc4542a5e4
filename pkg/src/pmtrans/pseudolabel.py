"""Target pseudo-labels from prototype-seeded clustering.

Centroids are initialized as probability-weighted feature means, then a
small number of assign/recompute rounds runs with cosine-similarity
assignment. No randomness: identical inputs give identical labels.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import ShapeError

CLUSTER_ITERATIONS = 2
_NORM_EPS = 1e-12


class DegenerateInputWarning(UserWarning):
    pass


@dataclass
class PseudoState:
    centroids: np.ndarray    # (n_classes, feat_dim)
    assignments: np.ndarray  # (n_target,) int64
    epoch_of_refresh: int


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(n, _NORM_EPS)


def refresh_pseudo_labels(features: np.ndarray, probs: np.ndarray,
                          n_classes: int, iterations: int = CLUSTER_ITERATIONS,
                          epoch: int = 0) -> PseudoState:
    """Cluster target features into class prototypes.

    Round zero seeds centroid k with the probs[:, k]-weighted feature mean;
    each iteration assigns every sample to its max-cosine centroid and then
    recomputes centroids as plain means of their members. A cluster that
    attracts no members keeps the centroid it had going into the round.
    """
    features = np.asarray(features, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if features.ndim != 2 or probs.shape != (features.shape[0], n_classes):
        raise ShapeError("features (N, D) and probs (N, K) must agree")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if features.shape[0] < n_classes:
        warnings.warn("fewer target samples than classes; clusters will "
                      "be degenerate", DegenerateInputWarning)

    weight = probs.sum(axis=0)  # (K,)
    centroids = (probs.T @ features) / np.maximum(weight, _NORM_EPS)[:, None]
    feat_unit = _unit_rows(features)
    assignments = np.zeros(features.shape[0], dtype=np.int64)
    for _ in range(iterations):
        sims = feat_unit @ _unit_rows(centroids).T
        assignments = sims.argmax(axis=1)
        for k in range(n_classes):
            members = assignments == k
            if members.any():
                centroids[k] = features[members].mean(axis=0)
    return PseudoState(centroids=centroids.astype(np.float32),
                       assignments=assignments, epoch_of_refresh=epoch)


def collect_features(images: np.ndarray, params, cfg: M.ModelConfig,
                     batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Pooled features and softmax probs over a full set, no gradients."""
    feats, probs = [], []
    for start in range(0, images.shape[0], batch_size):
        rec = M.forward(images[start:start + batch_size], params, cfg)
        feats.append(rec.pooled.data)
        probs.append(T.softmax(rec.logits, axis=-1).data)
    return np.concatenate(feats), np.concatenate(probs)


def refresh_from_model(images: np.ndarray, params, cfg: M.ModelConfig,
                       epoch: int, iterations: int = CLUSTER_ITERATIONS,
                       batch_size: int = 64) -> tuple[PseudoState, np.ndarray]:
    """Run the model over the target set and cluster the results.

    Returns the new PseudoState plus the plain softmax-argmax predictions,
    which callers log to compare clustering against the raw classifier.
    """
    feats, probs = collect_features(images, params, cfg, batch_size)
    state = refresh_pseudo_labels(feats, probs, cfg.n_classes,
                                  iterations=iterations, epoch=epoch)
    return state, probs.argmax(axis=1)

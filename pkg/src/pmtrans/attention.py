"""Per-patch attention mass for label re-weighting.

Two scoring paths, one per pooling mode. With a class token the score of a
patch is the attention the class token pays it, head-averaged within each
layer, then averaged across layers, with the token's self-entry dropped and
the remainder renormalized. With mean pooling the score is a class
activation: the classifier row of the scored class dotted with each final
patch feature, softmaxed over patches.

Scores are taken from detached arrays on purpose. They re-weight labels,
and letting the label definition backpropagate into the encoder would hand
the model a shortcut through its own supervision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ForwardRecord
from .tensor import ContractError, SequencingError


@dataclass
class AttentionScores:
    scores: np.ndarray            # (B, n), rows sum to 1
    method: str                   # "cls" or "cam"
    class_index: np.ndarray | None = None  # (B,) for the cam path


def cls_attention_scores(record: ForwardRecord) -> AttentionScores:
    """Class-token attention onto patches, averaged over heads and layers."""
    if not record.attention:
        raise ContractError("forward record carries no attention maps")
    s = record.attention[0].shape[-1]
    n = record.patch_features.shape[1]
    if s != n + 1:
        raise ContractError("cls scoring needs a model with a class token")
    rows = []
    for layer in record.attention:
        head_avg = layer.mean(axis=1)          # (B, s, s)
        rows.append(head_avg[:, 0, :])         # class-token row, (B, s)
    mean_row = np.mean(rows, axis=0)
    patch_part = mean_row[:, 1:]               # drop the self-entry
    denom = patch_part.sum(axis=1, keepdims=True)
    if np.any(denom <= 0):
        raise ContractError("class token attends only to itself")
    return AttentionScores(scores=(patch_part / denom).astype(np.float32),
                           method="cls")


def cam_attention_scores(record: ForwardRecord, classifier_weights: np.ndarray,
                         class_index: np.ndarray) -> AttentionScores:
    """Softmax over patches of the scored class's activation per patch.

    classifier_weights has shape (D, K) matching the head layout; the scored
    column is selected per sample by class_index.
    """
    feats = record.patch_features.data        # (B, n, D), detached view
    b, n, d = feats.shape
    class_index = np.asarray(class_index, dtype=np.int64)
    if class_index.shape != (b,):
        raise ContractError(f"need one class index per sample, got {class_index.shape}")
    k = classifier_weights.shape[1]
    if np.any(class_index < 0) or np.any(class_index >= k):
        raise ContractError("class index out of range")
    w_rows = classifier_weights.T[class_index]      # (B, D)
    m = np.einsum("bnd,bd->bn", feats, w_rows)      # activation per patch
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    scores = e / e.sum(axis=1, keepdims=True)
    return AttentionScores(scores=scores.astype(np.float32), method="cam",
                           class_index=class_index)


def select_class_index(domain: str, true_label=None, pseudo_label=None):
    """Which label anchors the activation map for a given domain."""
    if domain == "source":
        if true_label is None:
            raise ContractError("source scoring needs the ground-truth label")
        return true_label
    if domain == "target":
        if pseudo_label is None:
            raise SequencingError(
                "target attention scoring ran before the first pseudo-label refresh")
        return pseudo_label
    raise ContractError(f"unknown domain '{domain}'")


def scores_for(record: ForwardRecord, method: str,
               classifier_weights: np.ndarray | None = None,
               class_index: np.ndarray | None = None) -> AttentionScores:
    if method == "cls":
        return cls_attention_scores(record)
    if method == "cam":
        if classifier_weights is None or class_index is None:
            raise ContractError("cam scoring needs classifier weights and class indices")
        return cam_attention_scores(record, classifier_weights, class_index)
    raise ContractError(f"unknown attention method '{method}'")

"""Scalar objectives for adaptation training.

Five loss terms feed the combined objective: the supervised classification
loss on source logits, two label-space mixup terms that weight cross-entropy
against each constituent's label by that constituent's mixing weight, and two
feature-space mixup terms that compare pooled-feature similarity rows against
label-similarity rows. ce_total is the sum of the four mixup terms and
j_total = l_cls + alpha * ce_total.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, DTYPE, SequencingError, ShapeError, Tensor

# temperature for turning cosine similarities (bounded in [-1, 1]) into
# logits with a usable gradient scale
DEFAULT_TAU = 0.1


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("one_hot expects a rank-1 label array")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ContractError("one_hot: label outside [0, n_classes)")
    out = np.zeros((labels.shape[0], n_classes), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class SimilarityTargets:
    """Label-similarity rows the feature-space losses regress onto.

    y_is[a][b] = 1 iff mixed sample a's source constituent shares a class
    with source batch sample b, rows normalized to sum 1. y_it is the
    identity: mixed sample a was built from target sample a. row_mask is
    False where a y_is row had no positive entry; those rows are skipped.
    """

    y_is: np.ndarray
    y_it: np.ndarray
    row_mask: np.ndarray


@dataclass
class LossBreakdown:
    l_cls: Tensor
    l_l_is: Tensor
    l_l_it: Tensor
    l_f_is: Tensor
    l_f_it: Tensor
    ce_total: Tensor
    j_total: Tensor
    alpha: float

    def scalars(self) -> dict[str, float]:
        return {
            "l_cls": float(self.l_cls.data),
            "l_l_is": float(self.l_l_is.data),
            "l_l_it": float(self.l_l_it.data),
            "l_f_is": float(self.l_f_is.data),
            "l_f_it": float(self.l_f_it.data),
            "ce_total": float(self.ce_total.data),
            "j_total": float(self.j_total.data),
            "alpha": self.alpha,
        }


def _as_weight_vector(w, n: int, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=DTYPE).reshape(-1)
    if w.shape[0] != n:
        raise ShapeError(f"{name} has length {w.shape[0]}, expected {n}")
    if w.min(initial=0.0) < 0.0:
        raise ContractError(f"{name} must be non-negative")
    return w


def source_cls_loss(logits: Tensor, y_src: np.ndarray) -> Tensor:
    """Mean cross-entropy of source logits against one-hot labels."""
    return T.tmean(T.cross_entropy_rows(logits, y_src))


def label_space_loss(logits_mix: Tensor, y_src: np.ndarray,
                     y_tgt: np.ndarray, lam_src, lam_tgt) -> tuple[Tensor, Tensor]:
    """Mixing-weighted cross-entropy of mixed logits against each
    constituent's label.

    l_l_is = mean_a lam_src[a] * CE(logits_mix[a], y_src[a]) and the same
    for the target side with pseudo-label one-hots. Raises SequencingError
    when pseudo-labels have not been generated yet.
    """
    if y_tgt is None:
        raise SequencingError("label_space_loss: no pseudo-labels yet")
    b = logits_mix.shape[0]
    ls = _as_weight_vector(lam_src, b, "lam_src")
    lt = _as_weight_vector(lam_tgt, b, "lam_tgt")
    ce_s = T.cross_entropy_rows(logits_mix, y_src)
    ce_t = T.cross_entropy_rows(logits_mix, y_tgt)
    l_l_is = T.tmean(T.mul(ce_s, ls))
    l_l_it = T.tmean(T.mul(ce_t, lt))
    return l_l_is, l_l_it


def build_label_similarity(mix_labels: np.ndarray,
                           src_labels: np.ndarray | None = None) -> SimilarityTargets:
    """Construct the label-similarity targets for a mixed batch.

    mix_labels are the integer class labels of each mixed sample's source
    constituent; src_labels are the labels of the source batch being
    compared against (defaults to mix_labels, the in-batch pairing case).
    """
    mix_labels = np.asarray(mix_labels).reshape(-1)
    src = mix_labels if src_labels is None else np.asarray(src_labels).reshape(-1)
    same = (mix_labels[:, None] == src[None, :]).astype(DTYPE)
    row_sums = same.sum(axis=1)
    mask = row_sums > 0
    y_is = same.copy()
    y_is[mask] /= row_sums[mask, None]
    y_it = np.eye(mix_labels.shape[0], dtype=DTYPE)
    return SimilarityTargets(y_is=y_is, y_it=y_it, row_mask=mask)


def _similarity_ce_rows(h_a: Tensor, h_b: Tensor, target_rows: np.ndarray,
                        tau: float) -> Tensor:
    sim = T.matmul(T.normalize_rows(h_a), T.transpose(T.normalize_rows(h_b)))
    logits = T.mul(sim, np.float32(1.0 / tau))
    return T.cross_entropy_rows(logits, target_rows)


def feature_space_loss(h_mix: Tensor, h_src: Tensor, h_tgt: Tensor,
                       targets: SimilarityTargets, lam_src, lam_tgt,
                       tau: float = DEFAULT_TAU) -> tuple[Tensor, Tensor]:
    """Mixing-weighted cross-entropy between feature-similarity rows and
    label-similarity rows.

    Row a of the source-side logits is cos(h_mix[a], h_src[b]) / tau over
    all b, regressed onto targets.y_is[a]; rows flagged in targets.row_mask
    as having no positive entry contribute nothing and are excluded from
    the mean. The target side uses y_it and lam_tgt.
    """
    if tau <= 0.0:
        raise ContractError("feature_space_loss: tau must be positive")
    a = h_mix.shape[0]
    if targets.y_is.shape != (a, h_src.shape[0]):
        raise ShapeError(f"y_is {targets.y_is.shape} does not match batches")
    if targets.y_it.shape != (a, h_tgt.shape[0]):
        raise ShapeError(f"y_it {targets.y_it.shape} does not match batches")
    ls = _as_weight_vector(lam_src, a, "lam_src")
    lt = _as_weight_vector(lam_tgt, a, "lam_tgt")

    mask = targets.row_mask
    n_valid = int(mask.sum())
    if n_valid == 0:
        l_f_is = Tensor(np.zeros((), dtype=DTYPE))
    else:
        # masked rows get a placeholder uniform target so the CE contract
        # holds; their weight is zeroed and they stay out of the mean
        y_rows = targets.y_is.copy()
        y_rows[~mask] = 1.0 / y_rows.shape[1]
        ce_s = _similarity_ce_rows(h_mix, h_src, y_rows, tau)
        w = ls * mask.astype(DTYPE)
        l_f_is = T.mul(T.tsum(T.mul(ce_s, w)), np.float32(1.0 / n_valid))

    ce_t = _similarity_ce_rows(h_mix, h_tgt, targets.y_it, tau)
    l_f_it = T.tmean(T.mul(ce_t, lt))
    return l_f_is, l_f_it


def total_objective(l_cls: Tensor, l_l_is: Tensor, l_l_it: Tensor,
                    l_f_is: Tensor, l_f_it: Tensor, alpha: float) -> LossBreakdown:
    """Combine the five scalar terms into ce_total and j_total."""
    ce_total = T.add(T.add(l_f_is, l_f_it), T.add(l_l_is, l_l_it))
    j_total = T.add(l_cls, T.mul(ce_total, np.float32(alpha)))
    return LossBreakdown(l_cls=l_cls, l_l_is=l_l_is, l_l_it=l_l_it,
                         l_f_is=l_f_is, l_f_it=l_f_it,
                         ce_total=ce_total, j_total=j_total,
                         alpha=float(alpha))

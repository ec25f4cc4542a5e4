"""Per-patch mixing under a learnable Beta distribution.

The mixing player holds two unconstrained scalars mapped through
softplus(x) + 0.01 to the Beta shape parameters. Ratios are sampled one per
patch, the mixed sequence interpolates source and target patch embeddings,
and label weights are re-scaled by normalized attention mass. The Beta
parameters learn through a score-function estimator because Beta sampling
has no usable pathwise derivative; the log-density is built on the tape so
the estimator is one backward sweep.

Global mixing (one ratio for all patches) and rectangle mixing (copy a
patch-grid rectangle from the target) are the two baselines; both are
special cases of the per-patch mix with constant or binary ratio vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import (ContractError, DegenerateInputError, ShapeError, Tape,
                     Tensor)

POSITIVITY_EPS = 0.01
LAMBDA_CLAMP = 1e-6
WEIGHT_DENOM_FLOOR = 1e-8
BASELINE_DECAY = 0.9


def _inverse_softplus(y: float) -> float:
    # solve softplus(x) = y for y > 0
    return float(np.log(np.expm1(y)))


@dataclass
class BetaParams:
    """Unconstrained mixing-distribution parameters; shapes stay positive."""

    raw_b: Tensor
    raw_g: Tensor

    @classmethod
    def init(cls, beta: float = 1.0, gamma: float = 1.0) -> "BetaParams":
        if beta <= POSITIVITY_EPS or gamma <= POSITIVITY_EPS:
            raise ContractError(f"initial shapes must exceed {POSITIVITY_EPS}")
        return cls(
            raw_b=Tensor(_inverse_softplus(beta - POSITIVITY_EPS), requires_grad=True),
            raw_g=Tensor(_inverse_softplus(gamma - POSITIVITY_EPS), requires_grad=True),
        )

    def shape_tensors(self) -> tuple[Tensor, Tensor]:
        """Current (beta, gamma) as tape values for the log-density."""
        beta = T.add(T.softplus(self.raw_b), np.float32(POSITIVITY_EPS))
        gamma = T.add(T.softplus(self.raw_g), np.float32(POSITIVITY_EPS))
        return beta, gamma

    def shape_values(self) -> tuple[float, float]:
        b = float(np.logaddexp(0.0, float(self.raw_b.data))) + POSITIVITY_EPS
        g = float(np.logaddexp(0.0, float(self.raw_g.data))) + POSITIVITY_EPS
        return b, g

    def tensors(self) -> dict[str, Tensor]:
        return {"beta.raw_b": self.raw_b, "beta.raw_g": self.raw_g}


@dataclass
class MixSpec:
    """One batch of sampled mixes: ratios, attention mass, label weights."""

    lam: np.ndarray          # (B, n) sampled ratios in (0, 1)
    a_src: np.ndarray        # (B, n) normalized source attention
    a_tgt: np.ndarray        # (B, n) normalized target attention
    lam_src: np.ndarray      # (B,) label weight toward the source constituent
    lam_tgt: np.ndarray      # (B,) label weight toward the target constituent
    log_density: Tensor      # scalar, summed log-pdf of every drawn ratio


def sample_gamma(shape: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Marsaglia-Tsang squeeze sampler, vectorized over rejections."""
    if shape <= 0:
        raise ContractError("gamma shape must be positive")
    boost = 1.0
    a = shape
    out = np.empty(size, dtype=np.float64)
    if a < 1.0:
        # draw for a+1 and scale back by a uniform power
        u = rng.uniform(size=size)
        boost = u ** (1.0 / a)
        a = a + 1.0
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    need = np.arange(size)
    while need.size:
        x = rng.standard_normal(need.size)
        v = (1.0 + c * x) ** 3
        u = rng.uniform(size=need.size)
        ok = (v > 0) & (np.log(u) < 0.5 * x * x + d - d * v + d * np.log(np.where(v > 0, v, 1.0)))
        out[need[ok]] = d * v[ok]
        need = need[~ok]
    return out * boost


def build_log_density(params: BetaParams, lam: np.ndarray) -> Tensor:
    """Summed Beta log-pdf of fixed draws as a tape scalar over the raws."""
    lam = np.asarray(lam, dtype=np.float64).reshape(-1)
    if np.any(lam <= 0) or np.any(lam >= 1):
        raise ContractError("draws must lie strictly inside (0, 1)")
    beta_t, gamma_t = params.shape_tensors()
    s_log = np.float32(np.log(lam).sum())
    s_log1m = np.float32(np.log1p(-lam).sum())
    count = np.float32(lam.size)
    log_beta_fn = T.sub(T.add(T.lgamma(beta_t), T.lgamma(gamma_t)),
                        T.lgamma(T.add(beta_t, gamma_t)))
    return T.sub(
        T.add(T.mul(T.sub(beta_t, 1.0), s_log), T.mul(T.sub(gamma_t, 1.0), s_log1m)),
        T.mul(log_beta_fn, count))


def sample_lambda(params: BetaParams, n: int, rng: np.random.Generator
                  ) -> tuple[np.ndarray, Tensor]:
    """n i.i.d. Beta draws plus their summed log-pdf as a tape scalar."""
    if n < 1:
        raise ContractError("need at least one draw")
    b, g = params.shape_values()
    g1 = sample_gamma(b, n, rng)
    g2 = sample_gamma(g, n, rng)
    lam = np.clip(g1 / (g1 + g2), LAMBDA_CLAMP, 1.0 - LAMBDA_CLAMP)
    return lam.astype(np.float32), build_log_density(params, lam)


def mix_sequences(src: Tensor, tgt: Tensor, lam: np.ndarray) -> Tensor:
    """out_k = lam_k * src_k + (1 - lam_k) * tgt_k, ratio broadcast per patch.

    Accepts (n, D) with lam (n,) or batched (B, n, D) with lam (B, n).
    Ratios are fixed numbers here; gradients flow into both sequences only.
    """
    lam = np.asarray(lam, dtype=np.float32)
    if src.shape != tgt.shape:
        raise ShapeError(f"sequence shapes differ: {src.shape} vs {tgt.shape}")
    if lam.shape != src.shape[:-1]:
        raise ShapeError(f"ratio shape {lam.shape} does not match {src.shape[:-1]}")
    lam_col = lam[..., None]
    return T.add(T.mul(src, lam_col), T.mul(tgt, 1.0 - lam_col))


def mix_weights(lam: np.ndarray, a_src: np.ndarray, a_tgt: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray]:
    """Attention-re-scaled label weights; works on (n,) or (B, n) rows."""
    lam = np.atleast_2d(np.asarray(lam, dtype=np.float64))
    a_src = np.atleast_2d(np.asarray(a_src, dtype=np.float64))
    a_tgt = np.atleast_2d(np.asarray(a_tgt, dtype=np.float64))
    if not (lam.shape == a_src.shape == a_tgt.shape):
        raise ShapeError("ratio and attention rows must share one shape")
    for name, a in (("a_src", a_src), ("a_tgt", a_tgt)):
        if np.any(a < 0):
            raise ContractError(f"{name} has negative entries")
        if np.any(np.abs(a.sum(axis=-1) - 1.0) > 1e-5):
            raise ContractError(f"{name} rows must sum to 1 within 1e-5")
    num = (lam * a_src).sum(axis=-1)
    denom = num + ((1.0 - lam) * a_tgt).sum(axis=-1)
    if np.any(denom < WEIGHT_DENOM_FLOOR):
        raise DegenerateInputError("label-weight denominator below floor")
    lam_src = num / denom
    lam_tgt = 1.0 - lam_src
    return lam_src.astype(np.float32), lam_tgt.astype(np.float32)


def make_mix_spec(lam: np.ndarray, a_src: np.ndarray, a_tgt: np.ndarray,
                  log_density: Tensor) -> MixSpec:
    lam_src, lam_tgt = mix_weights(lam, a_src, a_tgt)
    return MixSpec(lam=np.atleast_2d(lam), a_src=np.atleast_2d(a_src),
                   a_tgt=np.atleast_2d(a_tgt), lam_src=lam_src,
                   lam_tgt=lam_tgt, log_density=log_density)


def mix_global(src: Tensor, tgt: Tensor, lam_scalar: float) -> Tensor:
    lam = np.full(src.shape[:-1], np.float32(lam_scalar), dtype=np.float32)
    return mix_sequences(src, tgt, lam)


def cut_lambda(grid: int, rect: tuple[int, int, int, int]) -> np.ndarray:
    """Binary per-patch ratio vector for a rectangle copy; 0 inside the rect."""
    r0, c0, rh, rw = rect
    if r0 < 0 or c0 < 0 or rh < 1 or rw < 1 or r0 + rh > grid or c0 + rw > grid:
        raise ShapeError(f"rectangle {rect} leaves the {grid}x{grid} patch grid")
    lam = np.ones((grid, grid), dtype=np.float32)
    lam[r0:r0 + rh, c0:c0 + rw] = 0.0
    return lam.reshape(-1)


def mix_cut(src: Tensor, tgt: Tensor, rect: tuple[int, int, int, int],
            grid: int) -> tuple[Tensor, float]:
    """Copy a patch-grid rectangle from tgt into src; returns (mix, lam_tgt)."""
    lam = cut_lambda(grid, rect)
    n = grid * grid
    if src.shape[-2] != n:
        raise ShapeError(f"sequence length {src.shape[-2]} is not {grid}^2")
    full_lam = np.broadcast_to(lam, src.shape[:-1]).astype(np.float32)
    mixed = mix_sequences(src, tgt, full_lam)
    lam_tgt = float((lam == 0.0).sum()) / n
    return mixed, lam_tgt


def sample_cut_rect(grid: int, area_frac: float, rng: np.random.Generator
                    ) -> tuple[int, int, int, int]:
    """Rectangle with roughly the requested area fraction, clipped to the grid."""
    area_frac = float(np.clip(area_frac, 0.0, 1.0))
    side = np.sqrt(area_frac)
    rh = int(np.clip(round(grid * side), 1, grid))
    rw = int(np.clip(round(grid * side), 1, grid))
    r0 = int(rng.integers(0, grid - rh + 1))
    c0 = int(rng.integers(0, grid - rw + 1))
    return (r0, c0, rh, rw)


def reinforce_grad(tp: Tape, log_density: Tensor, reward: float,
                   baseline: float, params: BetaParams
                   ) -> dict[str, np.ndarray]:
    """Gradient of -(reward - baseline) * log_density wrt the raw parameters.

    Descending the returned direction increases the expected reward, which is
    how the mixing player climbs the transfer loss. Existing gradients on the
    raw parameters are left untouched; only the delta is returned.
    """
    before_b = None if params.raw_b.grad is None else params.raw_b.grad.copy()
    before_g = None if params.raw_g.grad is None else params.raw_g.grad.copy()
    surrogate = T.mul(log_density, np.float32(-(reward - baseline)))
    tp.backward(surrogate)

    def delta(t: Tensor, before):
        after = t.grad if t.grad is not None else np.zeros_like(t.data)
        d = after - (before if before is not None else 0.0)
        t.grad = before
        return d

    return {"beta.raw_b": delta(params.raw_b, before_b),
            "beta.raw_g": delta(params.raw_g, before_g)}


def update_baseline(baseline: float, reward: float,
                    decay: float = BASELINE_DECAY) -> float:
    return decay * baseline + (1.0 - decay) * reward

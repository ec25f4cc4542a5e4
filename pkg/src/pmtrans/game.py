"""Three-player min-max training loop.

Each step computes one vector field over three disjoint parameter blocks:
the encoder and classifier descend j_total = l_cls + alpha * ce_total, while
the mixing-distribution parameters descend -alpha * ce_total, i.e. they climb
the transfer loss. The mixing block's gradient is a score-function estimate
(its samples are discrete draws, not differentiable paths), with a moving
average baseline for variance control. All three blocks are updated
simultaneously from the same pre-step parameters.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import attention as AT
from . import losses as LS
from . import model as M
from . import patchmix as PM
from . import pseudolabel as PL
from . import tensor as T
from .data import Dataset
from .tensor import ContractError, NumericError, Tensor

MIX_MODES = ("patchmix", "mixup", "cutmix", "none")
ATTENTION_METHODS = ("cls", "cam")
ALPHA_RATE = 10.0


@dataclass(frozen=True)
class FitSettings:
    """Training knobs; model shape rides along so one object describes a run."""

    model: M.ModelConfig
    epochs: int = 30
    warmup_epochs: int = 5
    batch_size: int = 16
    lr_encoder: float = 1e-3
    lr_classifier: float = 1e-2
    lr_mix: float = 1e-2
    weight_decay: float = 0.05
    tau: float = 0.1
    beta_init: float = 1.0
    gamma_init: float = 1.0
    mix_mode: str = "patchmix"
    attention: str = "cls"
    cluster_iterations: int = 2
    use_lf: bool = True
    use_ll: bool = True
    learn_mix: bool = True

    def __post_init__(self):
        if self.mix_mode not in MIX_MODES:
            raise ContractError(f"mix_mode must be one of {MIX_MODES}")
        if self.attention not in ATTENTION_METHODS:
            raise ContractError(f"attention must be one of {ATTENTION_METHODS}")
        if self.attention == "cls" and not self.model.use_cls_token:
            raise ContractError("cls attention scoring needs the cls token")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ContractError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")
        for k in ("lr_encoder", "lr_classifier", "lr_mix", "weight_decay"):
            if getattr(self, k) < 0:
                raise ContractError(f"{k} must be non-negative")
        if self.tau <= 0:
            raise ContractError("tau must be positive")


class AdamW:
    """Adaptive moments with decoupled weight decay over named tensors."""

    def __init__(self, tensors: dict[str, Tensor], lr: float,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = dict(tensors)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.t = 0

    def apply(self, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        lr = self.lr * lr_scale
        for name, p in self.tensors.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            step = self.m[name] / b1c / (np.sqrt(self.v[name] / b2c) + self.eps)
            p.data = (p.data - lr * (step + self.weight_decay * p.data)
                      ).astype(np.float32)


@dataclass
class GameState:
    settings: FitSettings
    params: dict[str, Tensor]
    encoder_names: list[str]
    classifier_names: list[str]
    beta: PM.BetaParams
    opt_encoder: AdamW
    opt_classifier: AdamW
    opt_mix: AdamW
    adapt_step: int = 0
    total_adapt_steps: int = 0
    baseline: float = 0.0
    pseudo: PL.PseudoState | None = None


@dataclass
class DomainBatch:
    x_src: np.ndarray
    y_src: np.ndarray
    x_tgt: np.ndarray | None = None
    pseudo_tgt: np.ndarray | None = None


@dataclass
class StepReport:
    breakdown: LS.LossBreakdown
    grad_norm_encoder: float
    grad_norm_classifier: float
    grad_norm_mix: float
    lam_mean: float
    lam_std: float
    beta_value: float
    gamma_value: float


@dataclass
class EpochRecord:
    """One metrics line; extras stay in memory and are never serialized."""

    epoch: int
    l_cls: float | None
    l_l_is: float | None
    l_l_it: float | None
    l_f_is: float | None
    l_f_it: float | None
    ce_total: float | None
    j_total: float | None
    alpha: float
    beta: float
    gamma: float
    src_acc: float
    tgt_acc: float
    pseudo_acc: float | None
    wall_ms: float
    extras: dict = field(default_factory=dict)

    FIELDS = ("epoch", "l_cls", "l_l_is", "l_l_it", "l_f_is", "l_f_it",
              "ce_total", "j_total", "alpha", "beta", "gamma", "src_acc",
              "tgt_acc", "pseudo_acc", "wall_ms")

    def to_line(self) -> str:
        return json.dumps({k: getattr(self, k) for k in self.FIELDS},
                          separators=(",", ":"))


def alpha_schedule(progress: float) -> float:
    """Monotone 0 -> ~1 ramp over the adaptation phase."""
    if not 0.0 <= progress <= 1.0:
        raise ContractError("progress must lie in [0, 1]")
    return float(2.0 / (1.0 + np.exp(-ALPHA_RATE * progress)) - 1.0)


def cosine_lr_scale(progress: float) -> float:
    """Cosine cooldown from 1 -> 0 across the adaptation phase.

    Configured learning rates are base rates; decaying them keeps late
    epochs from unlearning a good solution once the transfer terms are at
    full strength (the pseudo-label feedback loop is noisiest there).
    """
    if not 0.0 <= progress <= 1.0:
        raise ContractError("progress must lie in [0, 1]")
    return float(0.5 * (1.0 + np.cos(np.pi * progress)))


def build_state(settings: FitSettings, rng: np.random.Generator) -> GameState:
    params = M.init_params(settings.model, rng)
    enc, cls = M.split_param_names(params)
    overlap = set(enc) & set(cls)
    if overlap:
        raise ContractError(f"parameter blocks overlap: {sorted(overlap)}")
    beta = PM.BetaParams.init(settings.beta_init, settings.gamma_init)
    return GameState(
        settings=settings,
        params=params,
        encoder_names=enc,
        classifier_names=cls,
        beta=beta,
        opt_encoder=AdamW({k: params[k] for k in enc}, settings.lr_encoder,
                          settings.weight_decay),
        opt_classifier=AdamW({k: params[k] for k in cls},
                             settings.lr_classifier, settings.weight_decay),
        # the mixing block holds distribution shapes, not weights: no decay
        opt_mix=AdamW(beta.tensors(), settings.lr_mix, 0.0),
    )


def _block_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def _sample_mix(state: GameState, settings: FitSettings, mode: str, es, et,
                sc_s, sc_t, rng):
    """Draw mixing ratios per the active mode.

    Returns (mixed patch sequence, lam matrix, lam_src, lam_tgt,
    log_density). Only patchmix consults attention scores; the two
    baseline modes mix whole inputs and weight labels by the raw ratio.
    """
    b = es.shape[0]
    n = es.shape[1]
    if mode == "patchmix":
        lam_flat, log_density = PM.sample_lambda(state.beta, b * n, rng)
        lam = lam_flat.reshape(b, n)
        lam_src, lam_tgt = PM.mix_weights(lam, sc_s, sc_t)
    elif mode == "mixup":
        draws, log_density = PM.sample_lambda(state.beta, b, rng)
        lam = np.repeat(draws[:, None], n, axis=1)
        lam_src, lam_tgt = draws, (1.0 - draws).astype(np.float32)
    elif mode == "cutmix":
        draws, log_density = PM.sample_lambda(state.beta, b, rng)
        grid = settings.model.grid
        lam = np.stack([PM.cut_lambda(grid, PM.sample_cut_rect(grid, d, rng))
                        for d in draws])
        lam_src = lam.mean(axis=1).astype(np.float32)
        lam_tgt = (1.0 - lam_src).astype(np.float32)
    else:
        raise ContractError(f"no mixing in mode '{mode}'")
    mixed = PM.mix_sequences(es, et, lam)
    return mixed, lam, lam_src, lam_tgt, log_density


def vector_field_blocks(batch: DomainBatch, state: GameState, alpha: float,
                        rng: np.random.Generator, mix_mode: str | None = None):
    """One simultaneous gradient evaluation of all three players.

    Returns (g_F, g_C, g_P, report). g_F and g_C are the tape gradients of
    j_total over their blocks; g_P is alpha times the score-function step
    direction on -(ce - baseline) * log_density, which equals
    -alpha * (score-function gradient of ce_total).
    """
    settings = state.settings
    cfg = settings.model
    mode = settings.mix_mode if mix_mode is None else mix_mode
    params = state.params
    y_src = LS.one_hot(batch.y_src, cfg.n_classes)

    zero = lambda: Tensor(np.zeros((), dtype=np.float32))
    lam_stats = (0.0, 0.0)
    reward = None
    use_mix = mode != "none" and (settings.use_lf or settings.use_ll)
    with T.tape() as tp:
        es = M.patch_embed(batch.x_src, params, cfg)
        rec_s = M.encode(es, params, cfg)
        l_cls = LS.source_cls_loss(rec_s.logits, y_src)
        l_l_is, l_l_it, l_f_is, l_f_it = zero(), zero(), zero(), zero()
        if use_mix:
            if batch.x_tgt is None:
                raise ContractError("mixing modes need a target batch")
            et = M.patch_embed(batch.x_tgt, params, cfg)
            rec_t = M.encode(et, params, cfg)
            sc_s = sc_t = None
            if mode == "patchmix":
                head_w = params["head.w"].data
                if settings.attention == "cam":
                    ci_s = AT.select_class_index("source",
                                                 true_label=batch.y_src)
                    ci_t = AT.select_class_index("target",
                                                 pseudo_label=batch.pseudo_tgt)
                else:
                    ci_s = ci_t = None
                sc_s = AT.scores_for(rec_s, settings.attention, head_w,
                                     ci_s).scores
                sc_t = AT.scores_for(rec_t, settings.attention, head_w,
                                     ci_t).scores
            mixed, lam, lam_src, lam_tgt, log_density = _sample_mix(
                state, settings, mode, es, et, sc_s, sc_t, rng)
            rec_m = M.encode(mixed, params, cfg)
            if settings.use_ll:
                y_tgt = LS.one_hot(batch.pseudo_tgt, cfg.n_classes)
                l_l_is, l_l_it = LS.label_space_loss(rec_m.logits, y_src,
                                                     y_tgt, lam_src, lam_tgt)
            if settings.use_lf:
                sim = LS.build_label_similarity(np.asarray(batch.y_src))
                l_f_is, l_f_it = LS.feature_space_loss(rec_m.pooled,
                                                       rec_s.pooled,
                                                       rec_t.pooled, sim,
                                                       lam_src, lam_tgt,
                                                       settings.tau)
            lam_stats = (float(lam.mean()), float(lam.std()))
        br = LS.total_objective(l_cls, l_l_is, l_l_it, l_f_is, l_f_it, alpha)
        tp.backward(br.j_total)

        def grab(names):
            out = {}
            for n in names:
                g = params[n].grad
                out[n] = g.copy() if g is not None else np.zeros_like(params[n].data)
            return out

        g_f = grab(state.encoder_names)
        g_c = grab(state.classifier_names)
        if use_mix and settings.learn_mix:
            reward = float(br.ce_total.data)
            raw = PM.reinforce_grad(tp, log_density, reward, state.baseline,
                                    state.beta)
            g_p = {k: np.float32(alpha) * v for k, v in raw.items()}
        else:
            g_p = {k: np.zeros_like(t.data)
                   for k, t in state.beta.tensors().items()}
    T.clear_grads(params.values())

    for label, block in (("encoder", g_f), ("classifier", g_c), ("mix", g_p)):
        for name, g in block.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {label} block "
                                   f"({name})")
    b_val, g_val = state.beta.shape_values()
    report = StepReport(
        breakdown=br,
        grad_norm_encoder=_block_norm(g_f),
        grad_norm_classifier=_block_norm(g_c),
        grad_norm_mix=_block_norm(g_p),
        lam_mean=lam_stats[0], lam_std=lam_stats[1],
        beta_value=b_val, gamma_value=g_val)
    return g_f, g_c, g_p, report, reward


def train_step(batch: DomainBatch, state: GameState, alpha: float,
               rng: np.random.Generator, mix_mode: str | None = None,
               lr_scale: float = 1.0) -> StepReport:
    """Evaluate the vector field once and move every block simultaneously."""
    g_f, g_c, g_p, report, reward = vector_field_blocks(batch, state, alpha,
                                                        rng, mix_mode)
    state.opt_encoder.apply(g_f, lr_scale)
    state.opt_classifier.apply(g_c, lr_scale)
    state.opt_mix.apply(g_p, lr_scale)
    if reward is not None:
        state.baseline = PM.update_baseline(state.baseline, reward)
    return report


def _evaluate(state: GameState, ds_source: Dataset, ds_target: Dataset):
    cfg = state.settings.model
    src = M.evaluate_accuracy(ds_source.images, ds_source.labels,
                              state.params, cfg)
    tgt = M.evaluate_accuracy(ds_target.images, ds_target.labels,
                              state.params, cfg)
    return src, tgt


def _mean_or_none(values):
    return float(np.mean(values)) if values else None


def fit(settings: FitSettings, ds_source: Dataset, ds_target: Dataset,
        rng: np.random.Generator, on_record=None
        ) -> tuple[GameState, list[EpochRecord]]:
    """Warmup on source labels, then adapt with the three-player game.

    Every adaptation epoch refreshes pseudo-labels, runs paired shuffled
    batches (remainders dropped), evaluates both domains, and appends one
    EpochRecord. Warmup runs at the base learning rates; adaptation cosine-
    decays them toward zero. on_record, when given, sees each record as it
    is produced so callers can flush partial metrics.
    """
    cfg = settings.model
    if ds_source.n_classes != cfg.n_classes or ds_target.n_classes != cfg.n_classes:
        raise ContractError("dataset class count does not match the model")
    state = build_state(settings, rng)
    bs = settings.batch_size
    n_pair = min(len(ds_source), len(ds_target))
    steps_per_epoch = n_pair // bs
    state.total_adapt_steps = max(1, settings.epochs * steps_per_epoch)

    records: list[EpochRecord] = []

    def emit(rec: EpochRecord):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    t0 = time.perf_counter()
    src_acc, tgt_acc = _evaluate(state, ds_source, ds_target)
    b_val, g_val = state.beta.shape_values()
    emit(EpochRecord(epoch=0, l_cls=None, l_l_is=None, l_l_it=None,
                     l_f_is=None, l_f_it=None, ce_total=None, j_total=None,
                     alpha=0.0, beta=b_val, gamma=g_val, src_acc=src_acc,
                     tgt_acc=tgt_acc, pseudo_acc=None,
                     wall_ms=(time.perf_counter() - t0) * 1000.0))

    epoch_no = 0
    mixing = settings.mix_mode != "none" and (settings.use_lf
                                              or settings.use_ll)

    for _ in range(settings.warmup_epochs):
        epoch_no += 1
        t0 = time.perf_counter()
        order = rng.permutation(len(ds_source))
        sums = []
        for i in range(0, (len(ds_source) // bs) * bs, bs):
            idx = order[i:i + bs]
            batch = DomainBatch(x_src=ds_source.images[idx],
                                y_src=ds_source.labels[idx])
            rep = train_step(batch, state, 0.0, rng, mix_mode="none")
            sums.append(rep.breakdown.scalars())
        src_acc, tgt_acc = _evaluate(state, ds_source, ds_target)
        b_val, g_val = state.beta.shape_values()
        emit(EpochRecord(
            epoch=epoch_no,
            l_cls=_mean_or_none([s["l_cls"] for s in sums]),
            l_l_is=0.0, l_l_it=0.0, l_f_is=0.0, l_f_it=0.0, ce_total=0.0,
            j_total=_mean_or_none([s["j_total"] for s in sums]),
            alpha=0.0, beta=b_val, gamma=g_val,
            src_acc=src_acc, tgt_acc=tgt_acc, pseudo_acc=None,
            wall_ms=(time.perf_counter() - t0) * 1000.0))

    for _ in range(settings.epochs):
        epoch_no += 1
        t0 = time.perf_counter()
        extras = {}
        if mixing:
            state.pseudo, raw_argmax = PL.refresh_from_model(
                ds_target.images, state.params, cfg, epoch=epoch_no,
                iterations=settings.cluster_iterations)
            pseudo_acc = float((state.pseudo.assignments
                                == ds_target.labels).mean())
            extras["refresh_argmax_acc"] = float(
                (raw_argmax == ds_target.labels).mean())
        else:
            pseudo_acc = None

        order_s = rng.permutation(len(ds_source))
        order_t = rng.permutation(len(ds_target))
        sums = []
        alpha = 0.0
        for i in range(steps_per_epoch):
            idx_s = order_s[i * bs:(i + 1) * bs]
            idx_t = order_t[i * bs:(i + 1) * bs]
            progress = state.adapt_step / state.total_adapt_steps
            alpha = alpha_schedule(progress)
            batch = DomainBatch(
                x_src=ds_source.images[idx_s], y_src=ds_source.labels[idx_s],
                x_tgt=ds_target.images[idx_t],
                pseudo_tgt=(state.pseudo.assignments[idx_t]
                            if state.pseudo is not None else None))
            rep = train_step(batch, state, alpha, rng,
                             lr_scale=cosine_lr_scale(progress))
            state.adapt_step += 1
            sums.append(rep.breakdown.scalars())
        src_acc, tgt_acc = _evaluate(state, ds_source, ds_target)
        b_val, g_val = state.beta.shape_values()
        emit(EpochRecord(
            epoch=epoch_no,
            l_cls=_mean_or_none([s["l_cls"] for s in sums]),
            l_l_is=_mean_or_none([s["l_l_is"] for s in sums]),
            l_l_it=_mean_or_none([s["l_l_it"] for s in sums]),
            l_f_is=_mean_or_none([s["l_f_is"] for s in sums]),
            l_f_it=_mean_or_none([s["l_f_it"] for s in sums]),
            ce_total=_mean_or_none([s["ce_total"] for s in sums]),
            j_total=_mean_or_none([s["j_total"] for s in sums]),
            alpha=alpha, beta=b_val, gamma=g_val,
            src_acc=src_acc, tgt_acc=tgt_acc, pseudo_acc=pseudo_acc,
            wall_ms=(time.perf_counter() - t0) * 1000.0,
            extras=extras))
    return state, records

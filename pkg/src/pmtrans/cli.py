"""Batch experiment runner.

Subcommands: generate (synthetic domain pair), train (full fit with
metrics + checkpoint), ablate (arms x seeds with a median summary),
grad-check (analytic-vs-numeric oracle suite), eval (checkpoint accuracy
report). Every run is determined by one flat config file; outputs carry
the config digest. Exit codes: 0 ok, 1 config error, 2 data error,
3 numeric failure, 4 acceptance failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import statistics
import sys

import numpy as np

from . import attention as AT
from . import config as C
from . import data as D
from . import game as G
from . import losses as LS
from . import model as M
from . import patchmix as PM
from . import tensor as T
from .config import ConfigError
from .tensor import (ContractError, DegenerateInputError, FormatError,
                     NumericError, SequencingError, ShapeError)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_ACCEPTANCE = 4

FD_TOL = 1e-3
# single-precision arithmetic puts truncation and round-off error in
# tension; a wrong gradient fails at every step size, so each block is
# scored by its best step from this grid
FD_STEPS = (1e-3, 2e-3, 4e-3)
MOMENT_TOL = 0.05
MOMENT_DRAWS = 200_000


def _apply_env_output(cfg: C.RunConfig) -> C.RunConfig:
    out = os.environ.get("PMTRANS_OUT")
    if out:
        cfg = dataclasses.replace(cfg, output_dir=out)
    return cfg


def dataset_paths(cfg: C.RunConfig) -> tuple[str, str]:
    src = cfg.source_path or os.path.join(cfg.output_dir, "source.pmds")
    tgt = cfg.target_path or os.path.join(cfg.output_dir, "target.pmds")
    return src, tgt


def _load_datasets(cfg: C.RunConfig) -> tuple[D.Dataset, D.Dataset]:
    src_path, tgt_path = dataset_paths(cfg)
    for p in (src_path, tgt_path):
        if not os.path.isfile(p):
            raise FormatError(f"dataset file not found: {p}")
    return D.load_dataset(src_path), D.load_dataset(tgt_path)


# ----------------------------------------------------------------- generate


def cmd_generate(cfg: C.RunConfig, log=print) -> int:
    src_path, tgt_path = dataset_paths(cfg)
    ds_s, ds_t = D.generate_pair(cfg.n_classes, cfg.n_per_domain,
                                 C.to_shift_spec(cfg), cfg.seed,
                                 image_size=cfg.image_size)
    for path, ds in ((src_path, ds_s), (tgt_path, ds_t)):
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        D.save_dataset(ds, path)
        log(f"{path} sha256 {D.file_digest(path)}")
    log(f"config digest {C.config_digest(cfg)}")
    return EXIT_OK


# -------------------------------------------------------------------- train


def _write_sidecar(cfg: C.RunConfig, digest: str) -> None:
    path = os.path.join(cfg.output_dir, "config.resolved")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# digest: {digest}\n")
        fh.write(C.resolved_text(cfg))


def save_run_checkpoint(path: str, state: G.GameState) -> None:
    blocks = dict(state.params)
    blocks.update(state.beta.tensors())
    M.save_checkpoint(blocks, path)


def cmd_train(cfg: C.RunConfig, log=print) -> int:
    ds_s, ds_t = _load_datasets(cfg)
    settings = C.to_fit_settings(cfg)
    digest = C.config_digest(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.output_dir, "metrics.jsonl")
    rng = np.random.default_rng(cfg.seed)
    with open(metrics_path, "w", encoding="utf-8") as fh:

        def on_record(rec: G.EpochRecord) -> None:
            if cfg.deterministic_timing:
                rec = dataclasses.replace(rec, wall_ms=0.0)
            fh.write(rec.to_line() + "\n")
            fh.flush()

        state, records = G.fit(settings, ds_s, ds_t, rng,
                               on_record=on_record)
    save_run_checkpoint(os.path.join(cfg.output_dir, "model.ckpt"), state)
    _write_sidecar(cfg, digest)
    last = records[-1]
    log(f"train complete: {len(records)} records, src_acc {last.src_acc:.4f} "
        f"tgt_acc {last.tgt_acc:.4f}")
    log(f"config digest {digest}")
    return EXIT_OK


# ------------------------------------------------------------------- ablate


def parse_arm(text: str) -> tuple[str, dict[str, str]]:
    """'name: key=val, key=val' -> (name, overrides). Overrides may be empty."""
    name, sep, rest = text.partition(":")
    name = name.strip()
    if not sep or not name:
        raise ConfigError(f"arm must look like 'name: key=val, ...', "
                          f"got {text!r}")
    overrides: dict[str, str] = {}
    rest = rest.strip()
    if rest:
        for part in rest.split(","):
            key, eq, value = part.partition("=")
            key = key.strip()
            if not eq or not key:
                raise ConfigError(f"arm '{name}': bad override {part.strip()!r}")
            if key in overrides:
                raise ConfigError(f"arm '{name}': duplicate override '{key}'")
            overrides[key] = value.strip()
    return name, overrides


def run_arms(cfg: C.RunConfig, arms: list[tuple[str, dict[str, str]]],
             seeds: list[int], ds_s: D.Dataset, ds_t: D.Dataset,
             log=print) -> dict[str, float | str]:
    """Train every arm over every seed; median final target accuracy each.

    A failing run marks its arm 'failed' and the sweep moves on, so one
    broken configuration cannot sink a whole comparison.
    """
    results: dict[str, float | str] = {}
    for name, overrides in arms:
        finals: list[float] = []
        for seed in seeds:
            pairs = C.to_pairs(cfg)
            pairs.update(overrides)
            pairs["seed"] = str(seed)
            try:
                arm_cfg = C.resolve(pairs)
                settings = C.to_fit_settings(arm_cfg)
                _, records = G.fit(settings, ds_s, ds_t,
                                   np.random.default_rng(seed))
            except (ConfigError, ContractError, ShapeError, NumericError,
                    SequencingError, ValueError, ArithmeticError) as exc:
                log(f"arm {name} seed {seed} failed: {exc}")
                finals = []
                break
            finals.append(records[-1].tgt_acc)
            log(f"arm {name} seed {seed} tgt_acc {finals[-1]:.4f}")
        results[name] = statistics.median(finals) if finals else "failed"
    return results


def summary_csv(arms: list[tuple[str, dict[str, str]]],
                results: dict[str, float | str]) -> str:
    names = [name for name, _ in arms]
    cells = []
    for name in names:
        value = results[name]
        cells.append(value if isinstance(value, str) else f"{value:.4f}")
    return ",".join(names) + "\n" + ",".join(cells) + "\n"


def cmd_ablate(cfg: C.RunConfig, arm_specs: list[str], seed_list: str,
               log=print) -> int:
    arms = [parse_arm(spec) for spec in arm_specs]
    if len({name for name, _ in arms}) != len(arms):
        raise ConfigError("arm names must be unique")
    try:
        seeds = [int(s) for s in seed_list.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {seed_list!r}")
    if not seeds:
        raise ConfigError("need at least one seed")
    ds_s, ds_t = _load_datasets(cfg)
    results = run_arms(cfg, arms, seeds, ds_s, ds_t, log=log)
    table = summary_csv(arms, results)
    os.makedirs(cfg.output_dir, exist_ok=True)
    out_path = os.path.join(cfg.output_dir, "ablate_summary.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(table)
    log(table.rstrip("\n"))
    log(f"config digest {C.config_digest(cfg)}")
    return EXIT_OK


# --------------------------------------------------------------- grad-check
#
# The rig is deliberately tiny (8x8 images, one block) so central
# differences over every parameter stay well under the time budget while
# still exercising the full mixed-objective pipeline.

_CHECK_MODEL = dict(image_size=8, patch_size=4, n_layers=1, n_heads=2,
                    embed_dim=8, mlp_ratio=2.0, n_classes=3,
                    use_cls_token=True)


def _fd_block_errors(seed: int, inject: bool) -> dict[str, float]:
    cfg = M.ModelConfig(**_CHECK_MODEL)
    settings = G.FitSettings(model=cfg)
    state = G.build_state(settings, np.random.default_rng(seed))
    params = state.params
    rng_data = np.random.default_rng(seed + 1)
    x_s = rng_data.random((2, 1, 8, 8), dtype=np.float32)
    x_t = rng_data.random((2, 1, 8, 8), dtype=np.float32)
    y_s = rng_data.integers(0, 3, size=2)
    y_t = rng_data.integers(0, 3, size=2)
    batch = G.DomainBatch(x_src=x_s, y_src=y_s, x_tgt=x_t, pseudo_tgt=y_t)
    alpha = 0.8
    draw_seed = seed + 2

    g_f, g_c, _, _, _ = G.vector_field_blocks(
        batch, state, alpha, np.random.default_rng(draw_seed))
    analytic = {**g_f, **g_c}
    if inject:
        analytic["head.w"] = -analytic["head.w"]

    # freeze the stochastic and detached pieces, then treat the objective
    # as a plain function of the parameters
    lam = PM.sample_lambda(state.beta, 2 * cfg.n_patches,
                           np.random.default_rng(draw_seed))[0].reshape(2, -1)
    rec_s0 = M.forward(x_s, params, cfg)
    rec_t0 = M.forward(x_t, params, cfg)
    sc_s = AT.cls_attention_scores(rec_s0).scores
    sc_t = AT.cls_attention_scores(rec_t0).scores
    lam_src, lam_tgt = PM.mix_weights(lam, sc_s, sc_t)
    oh_s = LS.one_hot(y_s, 3)
    oh_t = LS.one_hot(y_t, 3)
    sim = LS.build_label_similarity(y_s)

    def j_value() -> float:
        es = M.patch_embed(x_s, params, cfg)
        et = M.patch_embed(x_t, params, cfg)
        rec_s = M.encode(es, params, cfg)
        rec_t = M.encode(et, params, cfg)
        rec_m = M.encode(PM.mix_sequences(es, et, lam), params, cfg)
        l_cls = LS.source_cls_loss(rec_s.logits, oh_s)
        l_l_is, l_l_it = LS.label_space_loss(rec_m.logits, oh_s, oh_t,
                                             lam_src, lam_tgt)
        l_f_is, l_f_it = LS.feature_space_loss(rec_m.pooled, rec_s.pooled,
                                               rec_t.pooled, sim,
                                               lam_src, lam_tgt)
        br = LS.total_objective(l_cls, l_l_is, l_l_it, l_f_is, l_f_it, alpha)
        return float(br.j_total.data)

    def block_error(names: list[str]) -> float:
        ana = np.concatenate([analytic[n].reshape(-1).astype(np.float64)
                              for n in names])
        best = np.inf
        for h in FD_STEPS:
            num = []
            for name in names:
                p = params[name]
                saved = p.data.copy()

                def f(theta, p=p):
                    p.data = theta
                    return j_value()

                num.append(T.finite_diff_grad(f, saved, h=h).reshape(-1))
                p.data = saved
            best = min(best, T.grad_rel_error(ana, np.concatenate(num)))
        return best

    return {"encoder": block_error(state.encoder_names),
            "classifier": block_error(state.classifier_names)}


def _moment_check(seed: int) -> tuple[float, float]:
    """Score-function estimate of d E[draw]/d beta at Beta(2, 2).

    The weighted log-density is assembled from the same closed form the
    sampler uses, so the tape's lgamma/softplus path is what gets tested.
    Returns (estimate, relative error vs the exact 0.125).
    """
    shapes = PM.BetaParams.init(2.0, 2.0)
    lam, _ = PM.sample_lambda(shapes, MOMENT_DRAWS,
                              np.random.default_rng(seed))
    lam64 = lam.astype(np.float64)
    w_log = np.float32((lam64 * np.log(lam64)).sum())
    w_log1m = np.float32((lam64 * np.log1p(-lam64)).sum())
    w_count = np.float32(lam64.sum())
    with T.tape() as tp:
        beta_t, gamma_t = shapes.shape_tensors()
        log_beta_fn = T.sub(T.add(T.lgamma(beta_t), T.lgamma(gamma_t)),
                            T.lgamma(T.add(beta_t, gamma_t)))
        weighted = T.sub(
            T.add(T.mul(T.sub(beta_t, 1.0), w_log),
                  T.mul(T.sub(gamma_t, 1.0), w_log1m)),
            T.mul(log_beta_fn, w_count))
        tp.backward(weighted)
    raw_grad = float(shapes.raw_b.grad)
    T.clear_grads([shapes.raw_b, shapes.raw_g])
    chain = 1.0 / (1.0 + np.exp(-float(shapes.raw_b.data)))
    estimate = raw_grad / (MOMENT_DRAWS * chain)
    exact = 0.125  # gamma / (beta + gamma)^2 at (2, 2)
    return estimate, abs(estimate - exact) / exact


def cmd_gradcheck(cfg: C.RunConfig, inject_sign_flip: bool = False,
                  log=print) -> int:
    ok = True
    errors = _fd_block_errors(cfg.seed, inject_sign_flip)
    for block, err in errors.items():
        passed = err <= FD_TOL
        ok = ok and passed
        log(f"block {block}: max rel err {err:.2e} (tol {FD_TOL:.1e}) "
            f"{'PASS' if passed else 'FAIL'}")
    estimate, rel = _moment_check(cfg.seed)
    passed = rel <= MOMENT_TOL
    ok = ok and passed
    log(f"beta moment d/dbeta: estimate {estimate:.5f} expected 0.12500 "
        f"rel err {rel:.2e} (tol {MOMENT_TOL:.1e}) "
        f"{'PASS' if passed else 'FAIL'}")
    log(f"grad-check: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_ACCEPTANCE


# --------------------------------------------------------------------- eval


def _sidecar_config(checkpoint_path: str, config_path: str | None
                    ) -> C.RunConfig:
    if config_path is None:
        config_path = os.path.join(os.path.dirname(checkpoint_path) or ".",
                                   "config.resolved")
        if not os.path.isfile(config_path):
            raise ConfigError(f"no --config given and {config_path} "
                              f"not found next to the checkpoint")
    return C.from_file(config_path)


def cmd_eval(checkpoint_path: str, dataset_path: str,
             config_path: str | None = None, log=print) -> int:
    cfg = _sidecar_config(checkpoint_path, config_path)
    model_cfg = C.to_model_config(cfg)
    blocks = M.load_checkpoint(checkpoint_path)
    blocks = {k: v for k, v in blocks.items() if not k.startswith("beta.")}
    params = M.init_params(model_cfg, np.random.default_rng(0))
    M.restore_params(params, blocks)
    ds = D.load_dataset(dataset_path)
    want = (1, model_cfg.image_size, model_cfg.image_size)
    if ds.images.shape[1:] != want:
        raise FormatError(f"dataset images {ds.images.shape[1:]} do not "
                          f"match the model input {want}")
    if ds.n_classes != model_cfg.n_classes:
        raise FormatError(f"dataset has {ds.n_classes} classes, model "
                          f"expects {model_cfg.n_classes}")
    preds = np.empty(len(ds), dtype=np.int64)
    for i in range(0, len(ds), 256):
        rec = M.forward(ds.images[i:i + 256], params, model_cfg)
        preds[i:i + 256] = rec.logits.data.argmax(axis=1)
    overall = float((preds == ds.labels).mean())
    log(f"config digest {C.config_digest(cfg)}")
    log(f"overall {overall:.4f} ({len(ds)} samples)")
    for k in range(model_cfg.n_classes):
        mask = ds.labels == k
        acc_k = float((preds[mask] == k).mean()) if mask.any() else float("nan")
        log(f"class {k} {acc_k:.4f} ({int(mask.sum())} samples)")
    return EXIT_OK


# --------------------------------------------------------------- entrypoint


class _Parser(argparse.ArgumentParser):
    # usage mistakes are config errors, not the default argparse exit 2
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pmtrans",
                     description="patch-mixing domain adaptation runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate",
                           help="write the synthetic source/target datasets")
    p_gen.add_argument("--config", required=True)

    p_train = sub.add_parser("train",
                             help="run the full fit; write metrics and a "
                                  "checkpoint")
    p_train.add_argument("--config", required=True)

    p_abl = sub.add_parser("ablate",
                           help="train arms x seeds, summarize median "
                                "target accuracy")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--arm", action="append", required=True,
                       metavar="SPEC",
                       help="'name: key=val, key=val' (repeatable)")
    p_abl.add_argument("--seeds", default="0,1,2,3,4",
                       help="comma-separated training seeds")

    p_gc = sub.add_parser("grad-check",
                          help="compare analytic gradients against "
                               "numeric oracles")
    p_gc.add_argument("--config", required=True)
    p_gc.add_argument("--inject-sign-flip", action="store_true",
                      help="flip one analytic gradient to prove the "
                           "checker catches it")

    p_eval = sub.add_parser("eval",
                            help="accuracy report for a checkpoint on a "
                                 "dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--config", default=None,
                        help="defaults to config.resolved beside the "
                             "checkpoint")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.dataset, args.config)
        cfg = _apply_env_output(C.from_file(args.config))
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.arm, args.seeds)
        if args.command == "grad-check":
            return cmd_gradcheck(cfg, args.inject_sign_flip)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DegenerateInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, ShapeError, SequencingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())

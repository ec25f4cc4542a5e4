"""Schedule, optimizer, vector field, and training-loop behaviour."""

import json

import numpy as np
import pytest

from pmtrans import data as D
from pmtrans import game as G
from pmtrans import losses as LS
from pmtrans import model as M
from pmtrans import patchmix as PM
from pmtrans import tensor as T
from pmtrans.tensor import ContractError, NumericError, Tensor

TINY = M.ModelConfig(image_size=8, patch_size=4, n_layers=1, n_heads=2,
                     embed_dim=8, mlp_ratio=2.0, n_classes=3,
                     use_cls_token=True)


def tiny_settings(**kw):
    base = dict(model=TINY, epochs=2, warmup_epochs=1, batch_size=4)
    base.update(kw)
    return G.FitSettings(**base)


def make_batch(rng, b=4, with_target=True):
    x_s = rng.uniform(0, 1, size=(b, 1, 8, 8)).astype(np.float32)
    y_s = rng.integers(0, 3, size=b)
    if not with_target:
        return G.DomainBatch(x_src=x_s, y_src=y_s)
    x_t = rng.uniform(0, 1, size=(b, 1, 8, 8)).astype(np.float32)
    p_t = rng.integers(0, 3, size=b)
    return G.DomainBatch(x_src=x_s, y_src=y_s, x_tgt=x_t, pseudo_tgt=p_t)


# ------------------------------------------------------------ alpha ramp


def test_alpha_schedule_endpoints():
    assert G.alpha_schedule(0.0) == 0.0
    want = 2.0 / (1.0 + np.exp(-10.0)) - 1.0
    assert abs(G.alpha_schedule(1.0) - want) < 1e-12
    assert abs(G.alpha_schedule(1.0) - 0.99991) < 1e-4


def test_alpha_schedule_monotone():
    ps = np.linspace(0, 1, 100)
    vals = [G.alpha_schedule(p) for p in ps]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(0.0 <= v <= 1.0 for v in vals)


def test_alpha_schedule_rejects_bad_progress():
    with pytest.raises(ContractError):
        G.alpha_schedule(-0.1)
    with pytest.raises(ContractError):
        G.alpha_schedule(1.5)


def test_cosine_lr_scale_endpoints_and_monotone():
    assert G.cosine_lr_scale(0.0) == 1.0
    assert abs(G.cosine_lr_scale(0.5) - 0.5) < 1e-12
    assert abs(G.cosine_lr_scale(1.0)) < 1e-12
    vals = [G.cosine_lr_scale(p) for p in np.linspace(0, 1, 100)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ContractError):
        G.cosine_lr_scale(1.1)


# -------------------------------------------------------------- optimizer


def test_adamw_zero_lr_leaves_params_untouched():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = G.AdamW({"p": p}, lr=0.0, weight_decay=0.05)
    before = p.data.tobytes()
    opt.apply({"p": np.array([3.0, 3.0], dtype=np.float32)})
    assert p.data.tobytes() == before


def test_adamw_lr_scale_zero_freezes_step():
    p = Tensor(np.array([1.5], dtype=np.float32), requires_grad=True)
    opt = G.AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    before = p.data.tobytes()
    opt.apply({"p": np.array([2.0], dtype=np.float32)}, lr_scale=0.0)
    # scale multiplies the whole update, weight decay included
    assert p.data.tobytes() == before
    opt.apply({"p": np.array([2.0], dtype=np.float32)}, lr_scale=0.5)
    assert p.data.tobytes() != before


def test_adamw_decoupled_decay_shrinks_without_gradient():
    p = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    opt = G.AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    opt.apply({"p": np.zeros(1, dtype=np.float32)})
    # pure decay: p <- p - lr*wd*p
    assert abs(float(p.data[0]) - 2.0 * (1 - 0.1 * 0.5)) < 1e-6


def test_adamw_first_step_is_signed_unit_step():
    p = Tensor(np.array([0.0, 0.0], dtype=np.float32), requires_grad=True)
    opt = G.AdamW({"p": p}, lr=0.01, weight_decay=0.0)
    opt.apply({"p": np.array([0.3, -0.7], dtype=np.float32)})
    # bias-corrected first step is lr * g/|g| elementwise (eps aside)
    np.testing.assert_allclose(p.data, [-0.01, 0.01], atol=1e-7)


# ------------------------------------------------------------ game state


def test_blocks_are_disjoint():
    state = G.build_state(tiny_settings(), np.random.default_rng(0))
    enc, cls = set(state.encoder_names), set(state.classifier_names)
    assert not enc & cls
    assert enc | cls == set(state.params)
    for t in state.beta.tensors().values():
        assert all(t is not p for p in state.params.values())


def test_updating_one_block_leaves_others_bitwise_unchanged():
    rng = np.random.default_rng(1)
    state = G.build_state(tiny_settings(), rng)
    batch = make_batch(rng)
    g_f, g_c, g_p, _, _ = G.vector_field_blocks(batch, state, 0.5, rng)
    snap = {k: v.data.copy() for k, v in state.params.items()}
    snap_b = {k: v.data.copy() for k, v in state.beta.tensors().items()}

    state.opt_encoder.apply(g_f)
    assert all(np.array_equal(state.params[k].data, snap[k])
               for k in state.classifier_names)
    assert all(np.array_equal(v.data, snap_b[k])
               for k, v in state.beta.tensors().items())

    state.opt_classifier.apply(g_c)
    assert all(np.array_equal(v.data, snap_b[k])
               for k, v in state.beta.tensors().items())

    enc_after = {k: state.params[k].data.copy() for k in state.encoder_names}
    state.opt_mix.apply(g_p)
    assert all(np.array_equal(state.params[k].data, enc_after[k])
               for k in state.encoder_names)


# ----------------------------------------------------------- vector field


def test_alpha_zero_reduces_to_source_gradients_and_zero_mix_grad():
    rng = np.random.default_rng(2)
    state = G.build_state(tiny_settings(), rng)
    batch = make_batch(rng)
    g_f, g_c, g_p, _, _ = G.vector_field_blocks(
        batch, state, 0.0, np.random.default_rng(7))
    g_f0, g_c0, _, _, _ = G.vector_field_blocks(
        batch, state, 0.0, np.random.default_rng(8), mix_mode="none")
    assert all(np.array_equal(g_f[k], g_f0[k]) for k in g_f)
    assert all(np.array_equal(g_c[k], g_c0[k]) for k in g_c)
    assert all(float(np.abs(v).max()) == 0.0 for v in g_p.values())


def test_mix_gradient_is_negated_alpha_scaled_score_gradient():
    rng = np.random.default_rng(3)
    state = G.build_state(tiny_settings(), rng)
    batch = make_batch(rng, b=2)
    alpha = 0.6
    seed = 11
    g_f, g_c, g_p, report, reward = G.vector_field_blocks(
        batch, state, alpha, np.random.default_rng(seed))

    # replicate the draws, then take the plain score-function gradient of
    # the transfer loss: grad of +(reward - baseline) * log_density
    lam, _ = PM.sample_lambda(state.beta, 2 * TINY.n_patches,
                              np.random.default_rng(seed))
    with T.tape() as tp:
        ld = PM.build_log_density(state.beta, lam)
        tp.backward(T.mul(ld, np.float32(reward - state.baseline)))
    for k, t in state.beta.tensors().items():
        descent_on_ce = t.grad
        np.testing.assert_array_equal(g_p[k],
                                      -np.float32(alpha) * descent_on_ce)
        t.grad = None


def test_encoder_classifier_gradients_match_replica_and_fd():
    """Replica tape must agree bitwise; FD must agree to 1e-3 globally."""
    rng = np.random.default_rng(4)
    state = G.build_state(tiny_settings(), rng)
    params = state.params
    batch = make_batch(rng, b=2)
    alpha = 0.8
    seed = 13
    g_f, g_c, _, _, _ = G.vector_field_blocks(
        batch, state, alpha, np.random.default_rng(seed))

    lam = PM.sample_lambda(state.beta, 2 * TINY.n_patches,
                           np.random.default_rng(seed))[0].reshape(2, -1)
    from pmtrans import attention as A
    rec_s0 = M.forward(batch.x_src, params, TINY)
    rec_t0 = M.forward(batch.x_tgt, params, TINY)
    sc_s = A.cls_attention_scores(rec_s0).scores
    sc_t = A.cls_attention_scores(rec_t0).scores
    lam_src, lam_tgt = PM.mix_weights(lam, sc_s, sc_t)
    y_s = LS.one_hot(batch.y_src, 3)
    y_t = LS.one_hot(batch.pseudo_tgt, 3)
    sim = LS.build_label_similarity(batch.y_src)

    def j_value():
        es = M.patch_embed(batch.x_src, params, TINY)
        et = M.patch_embed(batch.x_tgt, params, TINY)
        rec_s = M.encode(es, params, TINY)
        rec_t = M.encode(et, params, TINY)
        rec_m = M.encode(PM.mix_sequences(es, et, lam), params, TINY)
        l_cls = LS.source_cls_loss(rec_s.logits, y_s)
        l_l_is, l_l_it = LS.label_space_loss(rec_m.logits, y_s, y_t,
                                             lam_src, lam_tgt)
        l_f_is, l_f_it = LS.feature_space_loss(rec_m.pooled, rec_s.pooled,
                                               rec_t.pooled, sim,
                                               lam_src, lam_tgt)
        return LS.total_objective(l_cls, l_l_is, l_l_it, l_f_is, l_f_it,
                                  alpha).j_total

    with T.tape() as tp:
        tp.backward(j_value())
    merged = {**g_f, **g_c}
    for name, p in params.items():
        np.testing.assert_array_equal(merged[name], p.grad,
                                      err_msg=f"replica mismatch at {name}")
    T.clear_grads(params.values())

    ana_parts, num_parts = [], []
    for name, p in params.items():
        saved = p.data.copy()

        def f(theta, p=p):
            p.data = theta
            return float(j_value().data)

        num = T.finite_diff_grad(f, saved, h=3e-3)
        p.data = saved
        ana_parts.append(merged[name].reshape(-1).astype(np.float64))
        num_parts.append(num.reshape(-1))
    err = T.grad_rel_error(np.concatenate(ana_parts),
                           np.concatenate(num_parts))
    assert err <= 1e-3, f"vector-field rel err {err:.2e}"


def test_non_finite_state_aborts_step():
    rng = np.random.default_rng(5)
    state = G.build_state(tiny_settings(), rng)
    batch = make_batch(rng)
    state.params["head.b"].data[0] = np.inf
    with pytest.raises(NumericError):
        G.train_step(batch, state, 0.5, rng)


def test_mixing_modes_need_target_batch():
    rng = np.random.default_rng(6)
    state = G.build_state(tiny_settings(), rng)
    batch = make_batch(rng, with_target=False)
    with pytest.raises(ContractError):
        G.vector_field_blocks(batch, state, 0.5, rng)


@pytest.mark.parametrize("mode", ["patchmix", "mixup", "cutmix"])
def test_step_report_is_finite_in_every_mode(mode):
    rng = np.random.default_rng(7)
    state = G.build_state(tiny_settings(mix_mode=mode), rng)
    rep = G.train_step(make_batch(rng), state, 0.4, rng)
    for v in (rep.grad_norm_encoder, rep.grad_norm_classifier,
              rep.grad_norm_mix, rep.lam_mean, rep.lam_std,
              rep.beta_value, rep.gamma_value):
        assert np.isfinite(v)
    assert np.isfinite(rep.breakdown.scalars()["j_total"])


def test_use_ll_toggle_zeros_label_terms_only():
    rng = np.random.default_rng(9)
    state = G.build_state(tiny_settings(use_ll=False), rng)
    _, _, _, rep, _ = G.vector_field_blocks(make_batch(rng), state, 0.5,
                                            np.random.default_rng(1))
    s = rep.breakdown.scalars()
    assert s["l_l_is"] == 0.0 and s["l_l_it"] == 0.0
    assert s["l_f_is"] > 0.0 and s["l_f_it"] > 0.0


def test_use_lf_toggle_zeros_feature_terms_only():
    rng = np.random.default_rng(9)
    state = G.build_state(tiny_settings(use_lf=False), rng)
    _, _, _, rep, _ = G.vector_field_blocks(make_batch(rng), state, 0.5,
                                            np.random.default_rng(1))
    s = rep.breakdown.scalars()
    assert s["l_f_is"] == 0.0 and s["l_f_it"] == 0.0
    assert s["l_l_is"] > 0.0 and s["l_l_it"] > 0.0


def test_both_toggles_off_matches_mode_none_bitwise():
    state_a = G.build_state(tiny_settings(use_lf=False, use_ll=False),
                            np.random.default_rng(10))
    state_b = G.build_state(tiny_settings(), np.random.default_rng(10))
    batch = make_batch(np.random.default_rng(11))
    g_f, g_c, g_p, _, reward = G.vector_field_blocks(
        batch, state_a, 0.8, np.random.default_rng(12))
    g_f0, g_c0, _, _, _ = G.vector_field_blocks(
        batch, state_b, 0.8, np.random.default_rng(13), mix_mode="none")
    assert reward is None
    assert all(np.array_equal(g_f[k], g_f0[k]) for k in g_f)
    assert all(np.array_equal(g_c[k], g_c0[k]) for k in g_c)
    assert all(float(np.abs(v).max()) == 0.0 for v in g_p.values())


def test_learn_mix_off_freezes_beta_but_still_trains_encoder():
    rng = np.random.default_rng(14)
    state = G.build_state(tiny_settings(learn_mix=False), rng)
    snap_p = {k: v.data.copy() for k, v in state.params.items()}
    snap_b = {k: v.data.copy() for k, v in state.beta.tensors().items()}
    G.train_step(make_batch(rng), state, 0.7, rng)
    assert any(not np.array_equal(state.params[k].data, snap_p[k])
               for k in snap_p)
    assert all(np.array_equal(v.data, snap_b[k])
               for k, v in state.beta.tensors().items())


def test_zero_learning_rates_leave_all_blocks_unchanged():
    rng = np.random.default_rng(8)
    state = G.build_state(tiny_settings(lr_encoder=0.0, lr_classifier=0.0,
                                        lr_mix=0.0), rng)
    snap = {k: v.data.copy() for k, v in state.params.items()}
    snap_b = {k: v.data.copy() for k, v in state.beta.tensors().items()}
    rep = G.train_step(make_batch(rng), state, 0.9, rng)
    assert all(np.array_equal(state.params[k].data, snap[k]) for k in snap)
    assert all(np.array_equal(v.data, snap_b[k])
               for k, v in state.beta.tensors().items())
    assert np.isfinite(rep.breakdown.scalars()["j_total"])


# ------------------------------------------------- toy surrogate dynamics


def _toy_grads(wf_val, wp_val):
    """Gradient blocks of the scalar surrogate game j = (wf - wp)^2 with
    the production sign convention: F descends j, P descends -j."""
    w_f = Tensor(np.float32(wf_val), requires_grad=True)
    w_p = Tensor(np.float32(wp_val), requires_grad=True)
    with T.tape() as tp:
        d = T.reshape(T.sub(w_f, w_p), (1, 1))
        j = T.reshape(T.matmul(d, d), ())
        tp.backward(j)
    g_f = float(w_f.grad)
    g_p = -float(w_p.grad)  # cost of P is -j
    return g_f, g_p


def test_toy_game_signs_move_f_toward_and_p_away():
    wf, wp, lr = 2.0, 0.5, 0.1
    g_f, g_p = _toy_grads(wf, wp)
    wf2 = wf - lr * g_f
    wp2 = wp - lr * g_p
    assert abs(wf2 - wp) < abs(wf - wp)    # F chases
    assert abs(wp2 - wf) > abs(wp - wf)    # P flees
    # analytic values: dj/dwf = 2(wf-wp) = 3, d(-j)/dwp = 2(wf-wp) = 3
    assert abs(g_f - 3.0) < 1e-6
    assert abs(g_p - 3.0) < 1e-6


def test_toy_game_stationary_point_has_vanishing_field():
    g_f, g_p = _toy_grads(1.25, 1.25)
    assert abs(g_f) <= 1e-6
    assert abs(g_p) <= 1e-6


# -------------------------------------------------------------- fit loop


def small_data(seed=7, n=24):
    shift = D.ShiftSpec(intensity_invert=True, background_gradient_amp=0.4,
                        noise_std=0.05)
    return D.generate_pair(3, n, shift, seed=seed, image_size=8)


def test_fit_zero_epochs_emits_single_evaluation_record():
    ds_s, ds_t = small_data()
    st = tiny_settings(epochs=0, warmup_epochs=0)
    _, recs = G.fit(st, ds_s, ds_t, np.random.default_rng(0))
    assert len(recs) == 1
    r = recs[0]
    assert r.epoch == 0
    assert r.l_cls is None and r.j_total is None
    assert 0.0 <= r.src_acc <= 1.0 and 0.0 <= r.tgt_acc <= 1.0


def test_fit_record_sequence_and_alpha_ramp():
    ds_s, ds_t = small_data()
    st = tiny_settings(epochs=3, warmup_epochs=2, batch_size=6)
    _, recs = G.fit(st, ds_s, ds_t, np.random.default_rng(1))
    assert [r.epoch for r in recs] == list(range(6))
    for r in recs[1:3]:  # warmup epochs
        assert r.ce_total == 0.0 and r.alpha == 0.0 and r.pseudo_acc is None
    adapt = recs[3:]
    assert all(r.pseudo_acc is not None for r in adapt)
    assert all("refresh_argmax_acc" in r.extras for r in adapt)
    alphas = [r.alpha for r in adapt]
    assert alphas == sorted(alphas) and alphas[-1] > 0.5
    for r in adapt:
        assert r.ce_total is not None and r.ce_total >= 0.0
        line = json.loads(r.to_line())
        assert list(line) == list(G.EpochRecord.FIELDS)


def test_fit_is_seed_deterministic_up_to_wall_time():
    ds_s, ds_t = small_data()
    st = tiny_settings(epochs=2, warmup_epochs=1, batch_size=6)
    state_a, recs_a = G.fit(st, ds_s, ds_t, np.random.default_rng(3))
    state_b, recs_b = G.fit(st, ds_s, ds_t, np.random.default_rng(3))
    for a, b in zip(recs_a, recs_b):
        da = {**json.loads(a.to_line()), "wall_ms": 0.0}
        db = {**json.loads(b.to_line()), "wall_ms": 0.0}
        assert da == db
    assert all(np.array_equal(state_a.params[k].data, state_b.params[k].data)
               for k in state_a.params)


def test_fit_mode_none_ignores_target_domain_entirely():
    ds_s, ds_t1 = small_data(seed=7)
    _, ds_t2 = small_data(seed=19)  # different target draw, same sizes
    st = tiny_settings(epochs=2, warmup_epochs=1, batch_size=6,
                       mix_mode="none")
    state_a, recs_a = G.fit(st, ds_s, ds_t1, np.random.default_rng(4))
    state_b, recs_b = G.fit(st, ds_s, ds_t2, np.random.default_rng(4))
    assert all(np.array_equal(state_a.params[k].data, state_b.params[k].data)
               for k in state_a.params)
    for r in recs_a:
        assert r.pseudo_acc is None
        if r.epoch > 0:
            assert r.ce_total == 0.0
    # beta raws never moved off their initialization
    fresh = PM.BetaParams.init(st.beta_init, st.gamma_init)
    assert np.array_equal(state_a.beta.raw_b.data, fresh.raw_b.data)
    assert np.array_equal(state_a.beta.raw_g.data, fresh.raw_g.data)


def test_fit_settings_validation():
    with pytest.raises(ContractError):
        tiny_settings(mix_mode="blend")
    with pytest.raises(ContractError):
        tiny_settings(attention="rollout")
    with pytest.raises(ContractError):
        tiny_settings(lr_encoder=-1.0)
    no_cls = M.ModelConfig(image_size=8, patch_size=4, n_layers=1,
                           n_heads=2, embed_dim=8, mlp_ratio=2.0,
                           n_classes=3, use_cls_token=False)
    with pytest.raises(ContractError):
        tiny_settings(model=no_cls, attention="cls")

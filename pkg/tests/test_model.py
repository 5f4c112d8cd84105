"""Estimator: masking, mode semantics, decomposition, batched equivalence."""

import math
from array import array

import pytest

from cduq.mathcore import RngStream, Tensor, backward, concat_rows, mean_all
from cduq.model import (
    MODES,
    ModelConfig,
    PoseShapeOutput,
    forward,
    forward_hypotheses,
    hypothesis_task_loss,
    init_params,
    loss_task,
    param_names,
    sample_hypotheses,
    target_batch,
    theta_frame_error,
)

SMALL = ModelConfig(
    num_frames=6,
    obs_dim=5,
    d_theta=3,
    d_beta=2,
    window_half_width=1,
    d_embed=8,
    d_feat=7,
    enc_hidden=9,
    dec_hidden=10,
    loc_hidden=11,
)


def small_store(seed=3):
    return init_params(SMALL, RngStream(seed).derive("init"))


def small_input(seed=5):
    rng = RngStream(seed).derive("x")
    return Tensor((SMALL.num_frames, SMALL.obs_dim),
                  rng.gaussians(SMALL.num_frames * SMALL.obs_dim))


def small_target(seed=6):
    rng = RngStream(seed).derive("y")
    return PoseShapeOutput(
        theta=Tensor((SMALL.d_theta, SMALL.num_frames),
                     rng.gaussians(SMALL.d_theta * SMALL.num_frames)),
        beta=Tensor((SMALL.d_beta, SMALL.num_frames),
                    rng.gaussians(SMALL.d_beta * SMALL.num_frames)),
    )


def test_config_validation():
    assert ModelConfig().out_dim == 16
    with pytest.raises(ValueError):
        ModelConfig(num_frames=1).validate()
    with pytest.raises(ValueError):
        ModelConfig(mask_ratio=1.0).validate()
    with pytest.raises(ValueError):
        ModelConfig(dropout=-0.1).validate()
    with pytest.raises(ValueError):
        ModelConfig(num_frames=8, window_half_width=4).validate()
    with pytest.raises(ValueError):
        ModelConfig(d_feat=0).validate()
    SMALL.validate()


def test_pose_shape_output_validation():
    theta = Tensor((3, 4), [0.0] * 12)
    with pytest.raises(ValueError):
        PoseShapeOutput(theta=theta, beta=Tensor((2, 5), [0.0] * 10))
    with pytest.raises(ValueError):
        PoseShapeOutput(theta=Tensor((12,), [0.0] * 12), beta=theta)
    out = PoseShapeOutput(theta=theta, beta=Tensor((2, 4), [1.0] * 8))
    assert out.num_frames == 4
    both = out + out
    assert both.beta.tolist() == [2.0] * 8
    assert out.detach().theta._parents == ()


def test_init_params_matches_param_names():
    store = small_store()
    assert sorted(store.names()) == sorted(param_names(SMALL))
    assert store["model.enc.w1"].shape == (SMALL.obs_dim, SMALL.enc_hidden)
    assert store["model.dec.w1"].shape == (2 * SMALL.d_feat + 1, SMALL.dec_hidden)
    assert store["model.loc.wcorr"].shape == (SMALL.loc_hidden,
                                              SMALL.out_dim * SMALL.num_frames)
    assert store["model.mask_token"].shape == (1, SMALL.d_feat)
    assert store["model.enc.b1"].tolist() == [0.0] * SMALL.enc_hidden
    # mask token is initialized near zero on purpose
    assert max(abs(v) for v in store["model.mask_token"].tolist()) < 0.2


def test_init_scaling_statistics():
    cfg = ModelConfig()
    store = init_params(cfg, RngStream(11).derive("init"))
    w = store["model.enc.w1"].tolist()
    std = math.sqrt(sum(v * v for v in w) / len(w))
    expect = math.sqrt(2.0 / cfg.obs_dim)
    assert abs(std - expect) / expect < 0.1


def test_forward_validation():
    store = small_store()
    x = small_input()
    with pytest.raises(ValueError):
        forward(x, store, SMALL, "predict")
    with pytest.raises(ValueError):
        forward(Tensor((2, 2), [0.0] * 4), store, SMALL, "eval")
    with pytest.raises(ValueError):
        forward(x, store, SMALL, "train")  # stochastic mode without rng
    assert MODES == ("train", "eval", "mc_dropout")


def test_eval_mode_is_deterministic_and_unmasked():
    store = small_store()
    x = small_input()
    a = forward(x, store, SMALL, "eval")
    b = forward(x, store, SMALL, "eval")
    assert a.mask_used == (False,) * SMALL.num_frames
    assert a.y_final.theta.data.tobytes() == b.y_final.theta.data.tobytes()
    assert a.phi_gl.data.tobytes() == b.phi_gl.data.tobytes()


def test_train_mode_masks_ceil_of_ratio():
    store = small_store()
    x = small_input()
    rng = RngStream(9).derive("fw")
    res = forward(x, store, SMALL, "train", rng)
    assert sum(res.mask_used) == math.ceil(SMALL.mask_ratio * SMALL.num_frames)
    cfg16 = ModelConfig()
    store16 = init_params(cfg16, RngStream(2).derive("init"))
    x16 = Tensor((16, 24), RngStream(3).derive("x").gaussians(16 * 24))
    res16 = forward(x16, store16, cfg16, "train", RngStream(4).derive("fw"))
    assert sum(res16.mask_used) == 4  # ceil(0.25 * 16)


def test_final_equals_global_plus_correction():
    store = small_store()
    x = small_input()
    res = forward(x, store, SMALL, "mc_dropout", RngStream(13).derive("fw"))
    for part in ("theta", "beta"):
        g = getattr(res.y_global, part).tolist()
        c = getattr(res.y_correction, part).tolist()
        f = getattr(res.y_final, part).tolist()
        assert f == [a + b for a, b in zip(g, c)]


def test_stochastic_modes_without_noise_reduce_to_eval():
    cfg = ModelConfig(
        num_frames=SMALL.num_frames, obs_dim=SMALL.obs_dim, d_theta=SMALL.d_theta,
        d_beta=SMALL.d_beta, window_half_width=SMALL.window_half_width,
        d_embed=SMALL.d_embed, d_feat=SMALL.d_feat, enc_hidden=SMALL.enc_hidden,
        dec_hidden=SMALL.dec_hidden, loc_hidden=SMALL.loc_hidden,
        mask_ratio=0.0, dropout=0.0,
    )
    store = init_params(cfg, RngStream(3).derive("init"))
    x = small_input()
    ref = forward(x, store, cfg, "eval")
    rng = RngStream(21).derive("fw")
    hyps = sample_hypotheses(x, store, cfg, 3, rng)
    for h in hyps:
        assert h.y_final.theta.data.tobytes() == ref.y_final.theta.data.tobytes()
        assert h.y_final.beta.data.tobytes() == ref.y_final.beta.data.tobytes()


def test_sample_hypotheses_vary_and_validate():
    store = small_store()
    x = small_input()
    rng = RngStream(17).derive("fw")
    hyps = sample_hypotheses(x, store, SMALL, 4, rng, mode="train")
    blobs = {h.y_final.theta.data.tobytes() for h in hyps}
    assert len(blobs) > 1
    with pytest.raises(ValueError):
        sample_hypotheses(x, store, SMALL, 0, rng)
    with pytest.raises(ValueError):
        sample_hypotheses(x, store, SMALL, 2, rng, mode="eval")


def test_loss_task_oracle():
    pred = PoseShapeOutput(
        theta=Tensor((1, 3), [1.0, 2.0, 4.0]),
        beta=Tensor((1, 3), [0.0, 0.0, 0.0]),
    )
    target = PoseShapeOutput(
        theta=Tensor((1, 3), [0.0, 2.0, 1.0]),
        beta=Tensor((1, 3), [0.0, 0.0, 0.0]),
    )
    # position mse: (1 + 0 + 9 + three zeros) / 6; velocity rows are
    # pred (1, 2), target (2, -1) -> ((1-2)^2 + (2+1)^2 + two zeros) / 4
    want = 10.0 / 6.0 + 10.0 / 4.0
    assert loss_task(pred, target).item() == pytest.approx(want, rel=1e-15)


def test_theta_frame_error_oracle():
    pred = PoseShapeOutput(
        theta=Tensor((2, 2), [3.0, 1.0, 4.0, 1.0]),
        beta=Tensor((1, 2), [9.0, 9.0]),  # beta must not contribute
    )
    target = PoseShapeOutput(
        theta=Tensor((2, 2), [0.0, 1.0, 0.0, 1.0]),
        beta=Tensor((1, 2), [0.0, 0.0]),
    )
    assert theta_frame_error(pred, target) == pytest.approx((5.0 + 0.0) / 2.0)


def test_forward_hypotheses_matches_loop_without_dropout():
    cfg = ModelConfig(
        num_frames=SMALL.num_frames, obs_dim=SMALL.obs_dim, d_theta=SMALL.d_theta,
        d_beta=SMALL.d_beta, window_half_width=SMALL.window_half_width,
        d_embed=SMALL.d_embed, d_feat=SMALL.d_feat, enc_hidden=SMALL.enc_hidden,
        dec_hidden=SMALL.dec_hidden, loc_hidden=SMALL.loc_hidden, dropout=0.0,
    )
    store = init_params(cfg, RngStream(3).derive("init"))
    x = small_input()
    h = 5
    # without dropout both forms consume the rng as H mask draws in a row,
    # so sharing one stream lines the hypotheses up one to one
    rng_loop = RngStream(77).derive("fw")
    loop = [forward(x, store, cfg, "train", rng_loop) for _ in range(h)]
    hb = forward_hypotheses(x, store, cfg, h, RngStream(77).derive("fw"))
    d_embed, width = cfg.d_embed, cfg.out_dim * cfg.num_frames
    for i, ref in enumerate(loop):
        assert hb.mask_used[i] == ref.mask_used
        phi_row = hb.phi_gl.data[i * d_embed : (i + 1) * d_embed]
        assert phi_row == ref.phi_gl.data
        y_row = hb.y.data[i * width : (i + 1) * width]
        assert y_row == ref.y_final.theta.data + ref.y_final.beta.data


def test_forward_hypotheses_validation():
    store = small_store()
    x = small_input()
    rng = RngStream(1).derive("fw")
    with pytest.raises(ValueError):
        forward_hypotheses(x, store, SMALL, 0, rng)
    with pytest.raises(ValueError):
        forward_hypotheses(x, store, SMALL, 2, None)
    with pytest.raises(ValueError):
        forward_hypotheses(Tensor((1, 1), [0.0]), store, SMALL, 2, rng)


def test_hypothesis_task_loss_equals_mean_of_loss_task():
    store = small_store()
    x = small_input()
    target = small_target()
    h = 4
    rng_a = RngStream(19).derive("fw")
    loop = [forward(x, store, SMALL, "train", rng_a) for _ in range(h)]
    want = mean_all(concat_rows([loss_task(f.y_final, target) for f in loop])).item()

    cfg0 = ModelConfig(
        num_frames=SMALL.num_frames, obs_dim=SMALL.obs_dim, d_theta=SMALL.d_theta,
        d_beta=SMALL.d_beta, window_half_width=SMALL.window_half_width,
        d_embed=SMALL.d_embed, d_feat=SMALL.d_feat, enc_hidden=SMALL.enc_hidden,
        dec_hidden=SMALL.dec_hidden, loc_hidden=SMALL.loc_hidden, dropout=0.0,
    )
    store0 = init_params(cfg0, RngStream(3).derive("init"))
    rng_b = RngStream(19).derive("fw")
    loop0 = [forward(x, store0, cfg0, "train", rng_b) for _ in range(h)]
    want0 = mean_all(concat_rows([loss_task(f.y_final, target) for f in loop0])).item()
    hb = forward_hypotheses(x, store0, cfg0, h, RngStream(19).derive("fw"))
    got = hypothesis_task_loss(hb, cfg0, target_batch(target, h)).item()
    assert got == pytest.approx(want0, rel=1e-12)
    assert want != want0 or SMALL.dropout == 0.0  # dropout actually changed the loop


def test_target_batch_layout():
    target = small_target()
    pos, vel = target_batch(target, 3)
    t_count, d = SMALL.num_frames, SMALL.out_dim
    assert pos.shape == (3, d * t_count)
    assert vel.shape == (3, d * (t_count - 1))
    row = list(target.theta.data) + list(target.beta.data)
    assert pos.tolist() == row * 3
    for j in range(d):
        for t in range(t_count - 1):
            want = row[j * t_count + t + 1] - row[j * t_count + t]
            assert vel.data[j * (t_count - 1) + t] == want


def test_gradients_flow_to_parameters():
    store = small_store()
    x = small_input()
    target = small_target()
    res = forward(x, store, SMALL, "eval")
    loss = loss_task(res.y_final, target)
    wrt = [store["model.enc.w1"], store["model.loc.wcorr"], store["model.mask_token"]]
    g_enc, g_corr, g_token = backward(loss, wrt)
    assert g_enc is not None and any(v != 0.0 for v in g_enc)
    assert g_corr is not None and any(v != 0.0 for v in g_corr)
    assert g_token is None  # eval mode never touches the mask token


def test_forward_gradcheck_small():
    store = small_store()
    # jitter biases off zero so finite differences stay clear of relu kinks
    jit = RngStream(41).derive("jit")
    for name in param_names(SMALL):
        if ".b" in name:
            t = store[name]
            g = jit.gaussians(t.size)
            store[name] = Tensor(t.shape, array("d", [0.05 * v for v in g]))
    x = small_input()
    target = small_target()

    def loss_of(w):
        saved = store["model.glob.w1"]
        store["model.glob.w1"] = w
        try:
            res = forward(x, store, SMALL, "eval")
            return loss_task(res.y_final, target)
        finally:
            store["model.glob.w1"] = saved

    w0 = store["model.glob.w1"]
    (got,) = backward(loss_of(w0), [w0])
    h = 1e-6
    for i in range(0, w0.size, 7):
        up = array("d", w0.data)
        up[i] += h
        dn = array("d", w0.data)
        dn[i] -= h
        fd = (loss_of(Tensor(w0.shape, up)).item()
              - loss_of(Tensor(w0.shape, dn)).item()) / (2 * h)
        assert abs(got[i] - fd) / max(1.0, abs(fd)) < 1e-4

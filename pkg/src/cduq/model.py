"""Masked encoder-decoder pose-shape estimator.

Per-frame observations are encoded into feature tokens; a random subset of
frames is replaced by a learned placeholder token (train and mc_dropout
modes only). A global path pools the tokens and decodes every frame from
the pooled summary, the frame's own token and its normalized frame index.
A local path summarizes a window of frames around the sequence center,
fuses it with the global embedding into the joint representation
``phi_gl``, and emits an additive correction, so

    y_final = y_global + y_correction   (exactly, term by term).

Repeating a forward in train or mc_dropout mode with fresh randomness
yields distinct plausible hypotheses; eval mode is deterministic (no
masking, no dropout).
"""

import math
from dataclasses import dataclass
from functools import lru_cache

from . import kernels
from .mathcore import (
    ParamStore,
    Tensor,
    add,
    affine,
    block_mean_rows,
    concat_rows,
    diff_cols,
    dropout_mask,
    gather_rows,
    hconcat,
    mean_rows,
    mse,
    mul,
    mul_rowmask,
    relu,
    reshape,
    select_cols,
    slice_rows,
    sub,
    tile_rows,
    transpose2d,
)

MODES = ("train", "eval", "mc_dropout")


@dataclass(frozen=True)
class ModelConfig:
    num_frames: int = 16
    obs_dim: int = 24
    d_theta: int = 12
    d_beta: int = 4
    mask_ratio: float = 0.25
    window_half_width: int = 4
    d_embed: int = 64
    dropout: float = 0.1
    d_feat: int = 48
    enc_hidden: int = 64
    dec_hidden: int = 96
    loc_hidden: int = 128

    @property
    def out_dim(self):
        return self.d_theta + self.d_beta

    def validate(self):
        if self.num_frames < 2:
            raise ValueError("need at least 2 frames")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0 <= self.window_half_width < self.num_frames // 2:
            raise ValueError("window_half_width must fit inside the sequence")
        if min(self.obs_dim, self.d_theta, self.d_beta, self.d_embed,
               self.d_feat, self.enc_hidden, self.dec_hidden, self.loc_hidden) < 1:
            raise ValueError("dimensions must be positive")


@dataclass(frozen=True)
class PoseShapeOutput:
    """Pose coefficients theta [d_theta, T] and shape coefficients beta [d_beta, T]."""

    theta: Tensor
    beta: Tensor

    def __post_init__(self):
        if len(self.theta.shape) != 2 or len(self.beta.shape) != 2:
            raise ValueError("theta and beta must be 2-D")
        if self.theta.shape[1] != self.beta.shape[1]:
            raise ValueError("theta and beta must cover the same frames")

    @property
    def num_frames(self):
        return self.theta.shape[1]

    def detach(self):
        return PoseShapeOutput(self.theta.detach(), self.beta.detach())

    def __add__(self, other):
        return PoseShapeOutput(add(self.theta, other.theta), add(self.beta, other.beta))


@dataclass(frozen=True)
class ForwardResult:
    y_global: PoseShapeOutput
    y_correction: PoseShapeOutput
    y_final: PoseShapeOutput
    phi_gl: Tensor  # [1, d_embed]
    mask_used: tuple  # bool per frame, True = frame was masked


def init_params(cfg, rng, store=None, prefix="model."):
    """Initialize estimator parameters (He-scaled for relu layers)."""
    cfg.validate()
    if store is None:
        store = ParamStore()
    t_count = cfg.num_frames
    relu_gain, head_gain = math.sqrt(2.0), 1.0
    layers = [
        ("enc.w1", cfg.obs_dim, cfg.enc_hidden, relu_gain),
        ("enc.w2", cfg.enc_hidden, cfg.d_feat, head_gain),
        ("glob.w1", cfg.d_feat, cfg.enc_hidden, relu_gain),
        ("glob.w2", cfg.enc_hidden, cfg.d_embed, head_gain),
        ("dec.w1", 2 * cfg.d_feat + 1, cfg.dec_hidden, relu_gain),
        ("dec.w2", cfg.dec_hidden, cfg.out_dim, head_gain),
        ("loc.w1", cfg.d_feat + cfg.d_embed, cfg.loc_hidden, relu_gain),
        ("loc.wphi", cfg.loc_hidden, cfg.d_embed, head_gain),
        ("loc.wcorr", cfg.loc_hidden, cfg.out_dim * t_count, head_gain),
    ]
    for name, fan_in, fan_out, gain in layers:
        data = rng.derive("w", name).gaussians(fan_in * fan_out)
        kernels.vscale(data, gain / math.sqrt(fan_in), data)
        store[prefix + name] = Tensor((fan_in, fan_out), data)
        store[prefix + name.replace(".w", ".b")] = Tensor.zeros((fan_out,))
    token = rng.derive("w", "mask_token").gaussians(cfg.d_feat)
    kernels.vscale(token, 0.02, token)
    store[prefix + "mask_token"] = Tensor((1, cfg.d_feat), token)
    return store


def param_names(cfg, prefix="model."):
    base = [
        "enc.w1", "enc.b1", "enc.w2", "enc.b2",
        "glob.w1", "glob.b1", "glob.w2", "glob.b2",
        "dec.w1", "dec.b1", "dec.w2", "dec.b2",
        "loc.w1", "loc.b1", "loc.wphi", "loc.bphi", "loc.wcorr", "loc.bcorr",
        "mask_token",
    ]
    return [prefix + n for n in base]


def _maybe_dropout(x, cfg, mode, rng):
    if mode == "eval" or cfg.dropout == 0.0:
        return x
    return mul(x, dropout_mask(x.shape, cfg.dropout, rng))


def forward(x, store, cfg, mode, rng=None, prefix="model."):
    """One forward pass; train/mc_dropout modes consume randomness from rng.

    Randomness order per call: mask frame choice, then dropout masks for
    the encoder, global head, decoder and local head (in that order).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if x.shape != (cfg.num_frames, cfg.obs_dim):
        raise ValueError(f"expected observations {(cfg.num_frames, cfg.obs_dim)}, got {x.shape}")
    stochastic = mode != "eval"
    if stochastic and rng is None:
        raise ValueError(f"mode {mode!r} requires an rng")
    t_count = cfg.num_frames

    if stochastic and cfg.mask_ratio > 0.0:
        n_mask = math.ceil(cfg.mask_ratio * t_count)
        masked = frozenset(rng.sample_indices(t_count, n_mask))
    else:
        masked = frozenset()
    mask_used = tuple(t in masked for t in range(t_count))

    def p(name):
        return store[prefix + name]

    enc_h = relu(affine(x, p("enc.w1"), p("enc.b1")))
    enc_h = _maybe_dropout(enc_h, cfg, mode, rng)
    feats = affine(enc_h, p("enc.w2"), p("enc.b2"))  # [T, d_feat], unmasked tokens

    if masked:
        keep = [0.0 if m else 1.0 for m in mask_used]
        drop = [1.0 if m else 0.0 for m in mask_used]
        tokens = add(
            mul_rowmask(feats, keep),
            mul_rowmask(tile_rows(p("mask_token"), t_count), drop),
        )
    else:
        tokens = feats

    pooled = mean_rows(tokens)  # [1, d_feat]

    glob_h = relu(affine(pooled, p("glob.w1"), p("glob.b1")))
    glob_h = _maybe_dropout(glob_h, cfg, mode, rng)
    g_embed = affine(glob_h, p("glob.w2"), p("glob.b2"))  # [1, d_embed]

    index_col = Tensor((t_count, 1), [t / (t_count - 1) for t in range(t_count)])
    dec_in = hconcat([tile_rows(pooled, t_count), tokens, index_col])
    dec_h = relu(affine(dec_in, p("dec.w1"), p("dec.b1")))
    dec_h = _maybe_dropout(dec_h, cfg, mode, rng)
    y_rows = affine(dec_h, p("dec.w2"), p("dec.b2"))  # [T, out_dim]
    y_glob = transpose2d(y_rows)  # [out_dim, T]

    center = t_count // 2
    w = cfg.window_half_width
    window = slice_rows(feats, center - w, center + w + 1)
    loc_in = hconcat([mean_rows(window), g_embed])
    loc_h = relu(affine(loc_in, p("loc.w1"), p("loc.b1")))
    loc_h = _maybe_dropout(loc_h, cfg, mode, rng)
    phi_gl = affine(loc_h, p("loc.wphi"), p("loc.bphi"))
    corr = reshape(affine(loc_h, p("loc.wcorr"), p("loc.bcorr")), (cfg.out_dim, t_count))

    def split(full):
        return PoseShapeOutput(
            theta=slice_rows(full, 0, cfg.d_theta),
            beta=slice_rows(full, cfg.d_theta, cfg.out_dim),
        )

    y_global = split(y_glob)
    y_correction = split(corr)
    return ForwardResult(
        y_global=y_global,
        y_correction=y_correction,
        y_final=y_global + y_correction,
        phi_gl=phi_gl,
        mask_used=mask_used,
    )


def sample_hypotheses(x, store, cfg, num_hypotheses, rng, mode="mc_dropout", prefix="model."):
    """num_hypotheses stochastic forwards of the same input."""
    if num_hypotheses < 1:
        raise ValueError("need at least one hypothesis")
    if mode == "eval":
        raise ValueError("hypothesis sampling requires a stochastic mode")
    return [forward(x, store, cfg, mode, rng, prefix) for _ in range(num_hypotheses)]


@dataclass(frozen=True)
class HypothesisBatch:
    """Stochastic forwards stacked along rows for one-kernel-call layers.

    ``phi_gl`` is [H, d_embed]; ``y`` is [H, out_dim * T] with each row in
    the flattened-theta-then-flattened-beta layout the scorer consumes.
    """

    phi_gl: Tensor
    y: Tensor
    mask_used: tuple  # per hypothesis: bool per frame


@dataclass(frozen=True)
class _BatchPlan:
    rep: tuple  # pooled row index per (hypothesis, frame) row
    token_tile: tuple  # mask-token row 0 repeated H*T times
    window: tuple  # local-window row indices into the stacked frame rows
    dmajor: tuple  # column order turning frame-major rows into scorer layout
    vel_hi: tuple  # scorer-layout columns of frames 1..T-1 per output dim
    vel_lo: tuple  # scorer-layout columns of frames 0..T-2 per output dim
    index_col: Tensor


@lru_cache(maxsize=32)
def _batch_plan(cfg, h):
    t_count, d = cfg.num_frames, cfg.out_dim
    center, w = t_count // 2, cfg.window_half_width
    return _BatchPlan(
        rep=tuple(b for b in range(h) for _ in range(t_count)),
        token_tile=(0,) * (h * t_count),
        window=tuple(
            b * t_count + t for b in range(h) for t in range(center - w, center + w + 1)
        ),
        dmajor=tuple(t * d + j for j in range(d) for t in range(t_count)),
        vel_hi=tuple(j * t_count + t + 1 for j in range(d) for t in range(t_count - 1)),
        vel_lo=tuple(j * t_count + t for j in range(d) for t in range(t_count - 1)),
        index_col=Tensor(
            (h * t_count, 1),
            [t / (t_count - 1) for _ in range(h) for t in range(t_count)],
        ),
    )


def forward_hypotheses(x, store, cfg, num_hypotheses, rng, prefix="model."):
    """Train-mode forwards of one input, batched over hypotheses.

    Equivalent to stacking ``sample_hypotheses(..., mode="train")``: with
    dropout disabled the rows reproduce the per-hypothesis forwards exactly,
    and with dropout enabled the mask distribution is identical. Randomness
    order per call: the H frame-mask choices, then one dropout mask per
    layer over the stacked rows.
    """
    if num_hypotheses < 1:
        raise ValueError("need at least one hypothesis")
    if x.shape != (cfg.num_frames, cfg.obs_dim):
        raise ValueError(f"expected observations {(cfg.num_frames, cfg.obs_dim)}, got {x.shape}")
    if rng is None:
        raise ValueError("forward_hypotheses requires an rng")
    h, t_count = num_hypotheses, cfg.num_frames
    plan = _batch_plan(cfg, h)

    masks = []
    n_mask = math.ceil(cfg.mask_ratio * t_count) if cfg.mask_ratio > 0.0 else 0
    for _ in range(h):
        chosen = frozenset(rng.sample_indices(t_count, n_mask)) if n_mask else frozenset()
        masks.append(tuple(t in chosen for t in range(t_count)))

    def p(name):
        return store[prefix + name]

    xb = Tensor((h * t_count, cfg.obs_dim), x.data * h)
    enc_h = relu(affine(xb, p("enc.w1"), p("enc.b1")))
    enc_h = _maybe_dropout(enc_h, cfg, "train", rng)
    feats = affine(enc_h, p("enc.w2"), p("enc.b2"))  # [H*T, d_feat]

    if n_mask:
        keep = [0.0 if m else 1.0 for hyp in masks for m in hyp]
        drop = [1.0 if m else 0.0 for hyp in masks for m in hyp]
        tokens = add(
            mul_rowmask(feats, keep),
            mul_rowmask(gather_rows(p("mask_token"), plan.token_tile), drop),
        )
    else:
        tokens = feats

    pooled = block_mean_rows(tokens, t_count)  # [H, d_feat]

    glob_h = relu(affine(pooled, p("glob.w1"), p("glob.b1")))
    glob_h = _maybe_dropout(glob_h, cfg, "train", rng)
    g_embed = affine(glob_h, p("glob.w2"), p("glob.b2"))  # [H, d_embed]

    dec_in = hconcat([gather_rows(pooled, plan.rep), tokens, plan.index_col])
    dec_h = relu(affine(dec_in, p("dec.w1"), p("dec.b1")))
    dec_h = _maybe_dropout(dec_h, cfg, "train", rng)
    y_rows = affine(dec_h, p("dec.w2"), p("dec.b2"))  # [H*T, out_dim]

    window = gather_rows(feats, plan.window)
    loc_in = hconcat([block_mean_rows(window, 2 * cfg.window_half_width + 1), g_embed])
    loc_h = relu(affine(loc_in, p("loc.w1"), p("loc.b1")))
    loc_h = _maybe_dropout(loc_h, cfg, "train", rng)
    phi_gl = affine(loc_h, p("loc.wphi"), p("loc.bphi"))  # [H, d_embed]
    corr = affine(loc_h, p("loc.wcorr"), p("loc.bcorr"))  # [H, out_dim*T], scorer layout

    y_glob = select_cols(reshape(y_rows, (h, t_count * cfg.out_dim)), plan.dmajor)
    return HypothesisBatch(
        phi_gl=phi_gl, y=add(y_glob, corr), mask_used=tuple(masks)
    )


def target_batch(target, h):
    """Constant tensors matching HypothesisBatch.y for a loss against
    ``target``: (positions [H, out_dim*T], velocities [H, out_dim*(T-1)])."""
    row = target.theta.data + target.beta.data  # both blocks are frame-minor
    d, t_count = len(row) // target.num_frames, target.num_frames
    vel = [
        row[j * t_count + t + 1] - row[j * t_count + t]
        for j in range(d)
        for t in range(t_count - 1)
    ]
    return (
        Tensor((h, len(row)), row * h),
        Tensor((h, d * (t_count - 1)), vel * h),
    )


def hypothesis_task_loss(batch, cfg, targets):
    """Position MSE plus velocity MSE over stacked hypotheses.

    Equals the mean of ``loss_task`` over the individual hypotheses (the
    stacked blocks are equal-sized, so the grand mean is the mean of
    per-hypothesis means).
    """
    pos_t, vel_t = targets
    h = batch.y.shape[0]
    plan = _batch_plan(cfg, h)
    vel = sub(select_cols(batch.y, plan.vel_hi), select_cols(batch.y, plan.vel_lo))
    return add(mse(batch.y, pos_t), mse(vel, vel_t))


def loss_task(pred, target):
    """Position MSE plus frame-to-frame velocity MSE, over theta and beta."""
    full_p = concat_rows([pred.theta, pred.beta])
    full_t = concat_rows([target.theta, target.beta])
    return add(mse(full_p, full_t), mse(diff_cols(full_p), diff_cols(full_t)))


def theta_frame_error(pred, target):
    """Mean per-frame Euclidean distance between predicted and true theta."""
    th_p, th_t = pred.theta, target.theta
    d, t_count = th_p.shape
    total = 0.0
    for t in range(t_count):
        acc = 0.0
        for i in range(d):
            diff = th_p.data[i * t_count + t] - th_t.data[i * t_count + t]
            acc += diff * diff
        total += math.sqrt(acc)
    return total / t_count

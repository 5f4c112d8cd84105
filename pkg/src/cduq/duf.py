"""Learned nonconformity scorer and its losses.

The scorer maps (joint representation, pose-shape output) to a score in
(0, 1); low means conforming. It is trained discriminatively against the
estimator in alternating steps with least-squares targets:

    loss_score = mean(S(x, y_true)^2) + mean((1 - S(x, y_pred))^2)
    loss_adv   = mean(S(x, y_pred)^2)
    loss_total = l_task + lam * (loss_score + loss_adv)

Gradient isolation is structural, not conventional: the scorer step sees
only detached inputs (no path into the estimator), and the adversarial
term is computed through detached scorer weights (no path into the
scorer). ``score_tensor(..., freeze_scorer=True)`` implements the latter.
"""

from dataclasses import dataclass

from . import kernels
from .mathcore import (
    ParamStore,
    Tensor,
    add,
    affine,
    concat_rows,
    hconcat,
    mean_all,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    sub,
)


@dataclass(frozen=True)
class ScorerConfig:
    d_embed: int = 64
    num_frames: int = 16
    d_theta: int = 12
    d_beta: int = 4
    hidden: int = 128

    @property
    def input_dim(self):
        return self.d_embed + (self.d_theta + self.d_beta) * self.num_frames

    def validate(self):
        if min(self.d_embed, self.num_frames, self.d_theta, self.d_beta, self.hidden) < 1:
            raise ValueError("dimensions must be positive")


def init_scorer(cfg, rng, store=None, prefix="scorer."):
    cfg.validate()
    if store is None:
        store = ParamStore()
    layers = [
        ("w1", cfg.input_dim, cfg.hidden, 2.0 ** 0.5),
        ("w2", cfg.hidden, cfg.hidden, 2.0 ** 0.5),
        ("w3", cfg.hidden, 1, 1.0),
    ]
    for name, fan_in, fan_out, gain in layers:
        data = rng.derive("w", name).gaussians(fan_in * fan_out)
        kernels.vscale(data, gain / fan_in ** 0.5, data)
        store[prefix + name] = Tensor((fan_in, fan_out), data)
        store[prefix + name.replace("w", "b")] = Tensor.zeros((fan_out,))
    return store


def scorer_param_names(prefix="scorer."):
    return [prefix + n for n in ("w1", "b1", "w2", "b2", "w3", "b3")]


def score_rows(phi_gl, y_flat, store, cfg, prefix="scorer.", freeze_scorer=False):
    """Taped scores for stacked pairs; returns (scores [H, 1], activations [H, hidden]).

    ``phi_gl`` is [H, d_embed] and ``y_flat`` is [H, (d_theta+d_beta)*T]
    with rows in the flattened-theta-then-flattened-beta layout. With
    ``freeze_scorer`` the scorer weights enter as detached constants, so
    gradients flow to phi_gl and y_flat but structurally never to the
    scorer.
    """
    if len(phi_gl.shape) != 2 or phi_gl.shape[1] != cfg.d_embed:
        raise ValueError(f"expected phi_gl of shape (H, {cfg.d_embed}), got {phi_gl.shape}")

    def p(name):
        t = store[prefix + name]
        return t.detach() if freeze_scorer else t

    x = hconcat([phi_gl, y_flat])
    if x.shape[1] != cfg.input_dim:
        raise ValueError(f"scorer input width {x.shape[1]}, expected {cfg.input_dim}")
    h1 = relu(affine(x, p("w1"), p("b1")))
    h2 = relu(affine(h1, p("w2"), p("b2")))
    s = sigmoid(affine(h2, p("w3"), p("b3")))
    return s, h2


def score_tensor(phi_gl, y, store, cfg, prefix="scorer.", freeze_scorer=False):
    """Taped score; returns (score [1,1], penultimate activations [1, hidden]).

    Single-pair form of ``score_rows`` taking a PoseShapeOutput.
    """
    if phi_gl.shape != (1, cfg.d_embed):
        raise ValueError(f"expected phi_gl of shape (1, {cfg.d_embed}), got {phi_gl.shape}")
    y_flat = hconcat([
        reshape(y.theta, (1, y.theta.size)),
        reshape(y.beta, (1, y.beta.size)),
    ])
    return score_rows(phi_gl, y_flat, store, cfg, prefix, freeze_scorer)


def score(phi_gl, y, store, cfg, prefix="scorer."):
    """Plain float score in (0, 1); low = conforming. No tape is built."""
    s, _ = score_tensor(phi_gl.detach(), y.detach(), store, cfg, prefix)
    return s.item()


def embedding(phi_gl, y, store, cfg, prefix="scorer."):
    """Penultimate scorer activations for (phi_gl, y), as a float list."""
    _, h2 = score_tensor(phi_gl.detach(), y.detach(), store, cfg, prefix)
    return h2.tolist()


def _as_vector(values):
    tensors = []
    for v in values:
        if isinstance(v, Tensor):
            tensors.append(reshape(v, (v.size,)))
        else:
            tensors.append(Tensor.scalar(v))
    return concat_rows(tensors)


def loss_score(scores_true, scores_pred):
    """Scorer objective: true pairs toward 0, predicted pairs toward 1."""
    if not scores_true or not scores_pred:
        raise ValueError("loss_score requires non-empty score lists")
    s_true = _as_vector(scores_true)
    s_pred = _as_vector(scores_pred)
    gap = sub(Tensor.full(s_pred.shape, 1.0), s_pred)
    return add(mean_all(mul(s_true, s_true)), mean_all(mul(gap, gap)))


def loss_adv(scores_pred):
    """Adversarial objective for the estimator: predicted pairs toward 0."""
    if not scores_pred:
        raise ValueError("loss_adv requires a non-empty score list")
    s_pred = _as_vector(scores_pred)
    return mean_all(mul(s_pred, s_pred))


def loss_total(l_task, l_score, l_adv, lam):
    """Combined objective l_task + lam * (l_score + l_adv)."""
    if isinstance(l_task, Tensor) or isinstance(l_score, Tensor) or isinstance(l_adv, Tensor):
        to_t = lambda v: v if isinstance(v, Tensor) else Tensor.scalar(v)
        return add(to_t(l_task), scale(add(to_t(l_score), to_t(l_adv)), lam))
    return l_task + lam * (l_score + l_adv)

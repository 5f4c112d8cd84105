"""End-to-end training, evaluation and ablation.

Training alternates two objectives computed from the same forward state:
every iteration the estimator descends task loss plus ``lam`` times the
adversarial score term (through a frozen scorer), and every
``scorer_update_period`` iterations the scorer descends ``lam`` times its
discriminative loss on detached pairs. Both steps therefore see the
pre-step parameters; the scorer update is applied first, and the two
parameter sets are disjoint. All per-iteration loss components are logged;
``l_net = l_task + lam * (l_score + l_adv)`` holds exactly by
construction.
"""

import math
from dataclasses import asdict, dataclass, replace

from . import duf
from .errors import NumericRangeError, TrainingDivergedError
from .mathcore import Adam, RngStream, Tensor, add, backward, concat_rows, mean_all, reshape, scale
from .model import (
    ModelConfig,
    forward,
    forward_hypotheses,
    hypothesis_task_loss,
    init_params,
    param_names,
    target_batch,
    theta_frame_error,
)
from .synth import TrajectorySpec, corrupt_output


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 6
    batch_size: int = 3
    lr: float = 5e-4
    lam: float = 0.6
    h_train: int = 20
    scorer_update_period: int = 100
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cosine_schedule: bool = True

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.h_train < 1:
            raise ValueError("epochs, batch_size and h_train must be positive")
        if self.scorer_update_period < 1:
            raise ValueError("scorer_update_period must be positive")
        if self.lr <= 0 or self.lam < 0:
            raise ValueError("lr must be positive and lam non-negative")


@dataclass(frozen=True)
class EvalReport:
    task_error: float
    score_true_mean: float
    score_corrupt_mean: float
    separation: float
    auroc: float
    n: int


def default_config():
    """Paper-scale defaults for the synthetic benchmark."""
    return {
        "trajectory": TrajectorySpec(),
        "model": ModelConfig(),
        "scorer": duf.ScorerConfig(),
        "train": TrainConfig(),
        "alpha": 0.1,
        "h_predict": 20,
        "temperature": 1.0,
    }


_CONFIG_SECTIONS = ("trajectory", "model", "scorer", "train")


def apply_overrides(cfg, overrides):
    """New config bundle with JSON-style overrides applied.

    ``overrides`` maps section names (trajectory, model, scorer, train) to
    field dicts and scalar names (alpha, h_predict, temperature) to
    values. Unknown names and invalid values raise ValueError.
    """
    out = dict(cfg)
    for key, value in overrides.items():
        if key in _CONFIG_SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be an object")
            try:
                out[key] = replace(out[key], **value)
            except TypeError as exc:
                raise ValueError(f"config section {key!r}: {exc}") from exc
        elif key in ("alpha", "temperature"):
            out[key] = float(value)
        elif key == "h_predict":
            out[key] = int(value)
        else:
            raise ValueError(f"unknown config key {key!r}")
    for section in _CONFIG_SECTIONS:
        out[section].validate()
    if not 0.0 < out["alpha"] < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    if out["h_predict"] < 1:
        raise ValueError("h_predict must be positive")
    if out["temperature"] <= 0:
        raise ValueError("temperature must be positive")
    return out


def config_snapshot(cfg):
    """JSON-safe dict of every resolved config value."""
    out = {section: asdict(cfg[section]) for section in _CONFIG_SECTIONS}
    out["alpha"] = cfg["alpha"]
    out["h_predict"] = cfg["h_predict"]
    out["temperature"] = cfg["temperature"]
    return out


def split_stream(episodes, n_train, n_cal, n_test):
    """Contiguous train/cal/test split; disjoint by construction."""
    if min(n_train, n_cal, n_test) < 1:
        raise ValueError("every split must be non-empty")
    if n_train + n_cal + n_test > len(episodes):
        raise ValueError(
            f"split {n_train}+{n_cal}+{n_test} exceeds {len(episodes)} episodes"
        )
    ids = [ep.episode_id for ep in episodes]
    if len(set(ids)) != len(ids):
        raise ValueError("episode ids must be unique across the stream")
    train = episodes[:n_train]
    cal = episodes[n_train : n_train + n_cal]
    test = episodes[len(episodes) - n_test :]
    if n_train + n_cal > len(episodes) - n_test:
        raise ValueError("splits overlap")
    return train, cal, test


def _mean_loss(terms):
    if len(terms) == 1:
        return terms[0]
    return mean_all(concat_rows(terms))


def train(episodes, model_cfg, scorer_cfg, train_cfg):
    """Train estimator and scorer; returns (param store, history rows).

    Deterministic in (episodes, configs): all randomness derives from
    ``train_cfg.seed``. Raises TrainingDivergedError if any loss or
    parameter becomes non-finite.
    """
    if not episodes:
        raise ValueError("no training episodes")
    ids = [ep.episode_id for ep in episodes]
    if len(set(ids)) != len(ids):
        raise ValueError("training episodes must have unique ids")
    train_cfg.validate()
    root = RngStream(train_cfg.seed)
    store = init_params(model_cfg, root.derive("init", "model"))
    duf.init_scorer(scorer_cfg, root.derive("init", "scorer"), store)
    est_names = param_names(model_cfg)
    sc_names = duf.scorer_param_names()
    est_opt = Adam(train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps,
                   train_cfg.weight_decay)
    sc_opt = Adam(train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps,
                  train_cfg.weight_decay)

    order = list(range(len(episodes)))
    per_epoch = math.ceil(len(episodes) / train_cfg.batch_size)
    total = train_cfg.epochs * per_epoch
    history = []
    step = 0
    targets = {}  # episode_id -> constant loss tensors, reused across epochs
    try:
        for epoch in range(train_cfg.epochs):
            root.derive("order", epoch).shuffle(order)
            for b in range(per_epoch):
                batch = [episodes[i] for i in
                         order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]]
                if train_cfg.cosine_schedule:
                    lr_t = 0.5 * train_cfg.lr * (1.0 + math.cos(math.pi * step / total))
                else:
                    lr_t = train_cfg.lr
                history.append(
                    _train_step(batch, store, model_cfg, scorer_cfg, train_cfg,
                                est_names, sc_names, est_opt, sc_opt, root, step,
                                lr_t, targets)
                )
                step += 1
    except NumericRangeError as exc:
        raise TrainingDivergedError(step, f"step {step}: {exc}") from exc
    return store, history


def _train_step(batch, store, model_cfg, scorer_cfg, train_cfg,
                est_names, sc_names, est_opt, sc_opt, root, step, lr_t, targets):
    lam = train_cfg.lam
    task_terms = []
    pred_score_batches = []  # taped through estimator, scorer frozen
    detached = []  # (phi_gl, y, target positions) per episode, for the scorer
    for ep in batch:
        hb = forward_hypotheses(
            ep.observations, store, model_cfg, train_cfg.h_train,
            root.derive("hyp", step, ep.episode_id),
        )
        tgt = targets.get(ep.episode_id)
        if tgt is None:
            tgt = targets[ep.episode_id] = target_batch(ep.target, train_cfg.h_train)
        task_terms.append(hypothesis_task_loss(hb, model_cfg, tgt))
        s, _ = duf.score_rows(hb.phi_gl, hb.y, store, scorer_cfg, freeze_scorer=True)
        pred_score_batches.append(s)
        detached.append((hb.phi_gl.detach(), hb.y.detach(), tgt[0]))

    l_task_t = _mean_loss(task_terms)
    l_adv_t = duf.loss_adv(pred_score_batches)
    l_task = l_task_t.item()
    l_adv = l_adv_t.item()

    # Scorer loss is logged every iteration from the pre-step scorer; the
    # scorer step itself runs every scorer_update_period iterations, on
    # detached pairs, and is applied before the estimator step.
    scorer_step_due = lam > 0.0 and (step + 1) % train_cfg.scorer_update_period == 0
    true_scores = []
    pred_scores = []
    for phi, y_hat, pos in detached:
        s_true, _ = duf.score_rows(phi, pos, store, scorer_cfg)
        true_scores.append(s_true)
        if scorer_step_due:
            s_pred, _ = duf.score_rows(phi, y_hat, store, scorer_cfg)
            pred_scores.append(s_pred)
    if scorer_step_due:
        l_score_t = duf.loss_score(true_scores, pred_scores)
        l_score = l_score_t.item()
        sc_grads = _named_grads(scale(l_score_t, lam), store, sc_names)
        sc_opt.step(store, sc_grads, lr_t)
    else:
        true_vals = [v for s in true_scores for v in s.tolist()]
        pred_vals = [v for s in pred_score_batches for v in s.tolist()]
        l_score = (
            math.fsum(v * v for v in true_vals) / len(true_vals)
            + math.fsum((1.0 - v) ** 2 for v in pred_vals) / len(pred_vals)
        )

    est_loss = add(l_task_t, scale(l_adv_t, lam)) if lam != 0.0 else l_task_t
    est_grads = _named_grads(est_loss, store, est_names)
    est_opt.step(store, est_grads, lr_t)

    l_net = duf.loss_total(l_task, l_score, l_adv, lam)
    if not all(math.isfinite(v) for v in (l_task, l_score, l_adv, l_net)):
        raise TrainingDivergedError(step)
    return {"step": step, "l_task": l_task, "l_score": l_score,
            "l_adv": l_adv, "l_net": l_net}


def _named_grads(loss, store, names):
    tensors = [store[n] for n in names]
    grads = backward(loss, tensors)
    return {n: g for n, g in zip(names, grads) if g is not None}


def auroc(negatives, positives):
    """Rank-based AUROC: probability a positive outranks a negative."""
    if not negatives or not positives:
        raise ValueError("need both classes")
    both = sorted((v, 1) for v in positives)
    both += sorted((v, 0) for v in negatives)
    both.sort(key=lambda p: p[0])
    # average ranks over tie groups
    n = len(both)
    rank_sum_pos = 0.0
    i = 0
    while i < n:
        j = i
        while j < n and both[j][0] == both[i][0]:
            j += 1
        avg_rank = 0.5 * (i + 1 + j)  # ranks are 1-based
        rank_sum_pos += avg_rank * sum(1 for k in range(i, j) if both[k][1] == 1)
        i = j
    n_pos, n_neg = len(positives), len(negatives)
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def evaluate(episodes, store, model_cfg, scorer_cfg, seed=0, corrupt_sigma=0.5):
    """Eval-mode task error plus scorer discrimination statistics.

    True outputs should score low, corrupted ones (additive noise of scale
    ``corrupt_sigma``) high; separation is the mean score difference and
    auroc the ranking accuracy of that distinction.
    """
    if not episodes:
        raise ValueError("no evaluation episodes")
    rng = RngStream(seed).derive("evaluate")
    errs = []
    true_scores = []
    corrupt_scores = []
    for ep in episodes:
        res = forward(ep.observations, store, model_cfg, "eval")
        errs.append(theta_frame_error(res.y_final, ep.target))
        true_scores.append(duf.score(res.phi_gl, ep.target, store, scorer_cfg))
        bad = corrupt_output(ep.target, corrupt_sigma, rng.derive("corrupt", ep.episode_id))
        corrupt_scores.append(duf.score(res.phi_gl, bad, store, scorer_cfg))
    mean_true = math.fsum(true_scores) / len(true_scores)
    mean_bad = math.fsum(corrupt_scores) / len(corrupt_scores)
    return EvalReport(
        task_error=math.fsum(errs) / len(errs),
        score_true_mean=mean_true,
        score_corrupt_mean=mean_bad,
        separation=mean_bad - mean_true,
        auroc=auroc(true_scores, corrupt_scores),
        n=len(episodes),
    )


def ablate_h(train_episodes, eval_episodes, model_cfg, scorer_cfg, train_cfg,
             h_values, seeds):
    """Task error per (hypothesis count, seed); returns CSV-ready rows."""
    rows = []
    for h in h_values:
        for seed in seeds:
            cfg = replace(train_cfg, h_train=h, seed=seed)
            store, _ = train(train_episodes, model_cfg, scorer_cfg, cfg)
            report = evaluate(eval_episodes, store, model_cfg, scorer_cfg, seed=seed)
            rows.append({"H": h, "seed": seed, "task_error": report.task_error})
    return rows


def save_history(path, history):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,l_task,l_score,l_adv,l_net\n")
        for row in history:
            fh.write(
                f"{row['step']},{format(row['l_task'], '.17g')},"
                f"{format(row['l_score'], '.17g')},{format(row['l_adv'], '.17g')},"
                f"{format(row['l_net'], '.17g')}\n"
            )


def save_ablation(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("H,seed,task_error\n")
        for row in rows:
            fh.write(f"{row['H']},{row['seed']},{format(row['task_error'], '.17g')}\n")

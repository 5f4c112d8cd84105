"""Weighted split conformal calibration and prediction sets.

Each calibration score carries one probability mass; the test point's mass
sits at +infinity (its score is unknown, so it is treated as worst-case).
The threshold tau_star is the smallest calibration score whose cumulative
mass reaches 1 - alpha; if the finite masses cannot reach it, tau_star is
+infinity and the prediction set admits everything. Coverage then holds
under exchangeability, and degrades gracefully under drift by at most the
weighted total-variation gap (see the bounds module).

Weight schemes:

- ``uniform``: every mass is 1/(n+1); reduces to the classic split
  conformal order-statistic rule.
- ``feature_decay``: raw per-point weights (feature similarities from
  ``feature_weight``, or user-supplied) are converted to ranks (ascending,
  ties broken toward recency: a later index outranks an equal earlier one)
  and the point ranked r out of n gets mass rho^(n+1-r); the test point
  always gets rho^0 = 1. Masses are normalized over all n+1 points.
  Constant raw weights make the scheme a pure recency decay.

Mass comparisons use exact rational arithmetic on the float masses, so the
threshold rule is evaluated exactly as stated with no accumulation-order
artifacts.
"""

import json
import math
from dataclasses import dataclass
from fractions import Fraction

from .errors import FormatError
from . import duf
from .model import forward, sample_hypotheses

SCHEMES = ("uniform", "feature_decay")

_WEIGHT_TOL = 1e-12


def feature_weight(phi_pred, phi_true, temperature):
    """exp(-||phi_pred - phi_true||^2 / temperature)."""
    if len(phi_pred) != len(phi_true):
        raise ValueError("embedding lengths differ")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    sq = 0.0
    for a, b in zip(phi_pred, phi_true):
        d = a - b
        sq += d * d
    w = math.exp(-sq / temperature)
    return w if w > 0.0 else 5e-324  # stay in (0, 1] when exp underflows


def uniform_weights(n):
    """(calibration masses, test mass): n+1 equal masses of 1/(n+1)."""
    if n < 1:
        raise ValueError("need at least one calibration point")
    w = 1.0 / (n + 1)
    return [w] * n, w


def decay_normalize(raw_weights, rho):
    """Rank-based decay masses; see module docstring for the tie rule."""
    n = len(raw_weights)
    if n < 1:
        raise ValueError("need at least one calibration point")
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must be in (0, 1]")
    for w in raw_weights:
        if not math.isfinite(w) or w < 0.0:
            raise ValueError("raw weights must be finite and non-negative")
    order = sorted(range(n), key=lambda i: (raw_weights[i], i))
    unnorm = [0.0] * n
    for rank_minus_1, idx in enumerate(order):
        unnorm[idx] = rho ** (n - rank_minus_1)  # rank 1 (smallest) -> rho^n
    total = math.fsum(unnorm) + 1.0  # test point carries rho^0 = 1
    return [w / total for w in unnorm], 1.0 / total


def check_masses(weights, test_weight):
    total = math.fsum(weights) + test_weight
    if abs(total - 1.0) > _WEIGHT_TOL:
        raise ValueError(f"masses sum to {total!r}, expected 1 within {_WEIGHT_TOL}")


@dataclass(frozen=True)
class CalibrationExample:
    """One calibration point: a nonconformity score plus weight inputs.

    ``raw_weight`` may be supplied directly (external scores CSV) or left
    None, in which case the feature_decay scheme derives it from the
    embedding pair (phi_pred, phi_gt).
    """

    episode_id: int
    score: float
    raw_weight: float = None
    phi_pred: tuple = None
    phi_gt: tuple = None

    def validate(self):
        if not math.isfinite(self.score):
            raise ValueError(f"episode {self.episode_id}: score must be finite")
        if self.raw_weight is not None:
            if not 0.0 < self.raw_weight <= 1.0:
                raise ValueError(
                    f"episode {self.episode_id}: raw_weight must be in (0, 1]"
                )

    def resolve_weight(self, temperature):
        if self.raw_weight is not None:
            return self.raw_weight
        if self.phi_pred is None or self.phi_gt is None:
            raise ValueError(
                f"episode {self.episode_id}: need raw_weight or an embedding pair"
            )
        return feature_weight(self.phi_pred, self.phi_gt, temperature)


@dataclass(frozen=True)
class WeightedScoreDistribution:
    """Point masses at finite scores plus one mass at +infinity.

    ``atoms`` is a tuple of (score, mass) sorted ascending by score; equal
    scores may repeat and share their cumulative mass.
    """

    atoms: tuple
    infinity_mass: float

    def validate(self):
        prev = -math.inf
        for s, m in self.atoms:
            if not math.isfinite(s):
                raise ValueError("atom scores must be finite")
            if m < 0.0:
                raise ValueError("atom masses must be non-negative")
            if s < prev:
                raise ValueError("atoms must be sorted ascending by score")
            prev = s
        if self.infinity_mass < 0.0:
            raise ValueError("infinity mass must be non-negative")
        check_masses([m for _, m in self.atoms], self.infinity_mass)

    @classmethod
    def build(cls, scores, weights, infinity_mass):
        if len(scores) != len(weights):
            raise ValueError("scores and weights lengths differ")
        atoms = tuple(sorted(zip(scores, weights)))
        dist = cls(atoms=atoms, infinity_mass=infinity_mass)
        dist.validate()
        return dist


def weighted_quantile(dist, q):
    """Smallest atom score whose cumulative mass reaches q, else +inf.

    Ties share mass: the cumulative mass at a value v includes every atom
    with score <= v. ``q`` may be a Fraction for exact threshold
    arithmetic; floats are converted exactly.
    """
    target = q if isinstance(q, Fraction) else Fraction(q)
    if not 0 < target < 1:
        raise ValueError("quantile level must be in (0, 1)")
    atoms = dist.atoms
    cum = Fraction(0)
    i = 0
    n = len(atoms)
    while i < n:
        v = atoms[i][0]
        while i < n and atoms[i][0] == v:
            cum += Fraction(atoms[i][1])
            i += 1
        if cum >= target:
            return v
    return math.inf


@dataclass(frozen=True)
class CalibrationResult:
    tau_star: float  # may be +inf
    alpha: float
    scheme: str  # see SCHEMES
    rho: float  # 1.0 for uniform
    temperature: float
    n: int
    seed: int
    created_at: str

    def to_json(self):
        doc = {
            "alpha": self.alpha,
            "created_at": self.created_at,
            "n": self.n,
            "rho": self.rho,
            "scheme": self.scheme,
            "seed": self.seed,
            "tau_star": "inf" if math.isinf(self.tau_star) else self.tau_star,
            "temperature": self.temperature,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"calibration result is not valid JSON: {exc}") from exc
        try:
            tau_star = doc["tau_star"]
            tau_star = math.inf if tau_star == "inf" else float(tau_star)
            out = cls(
                tau_star=tau_star,
                alpha=float(doc["alpha"]),
                scheme=str(doc["scheme"]),
                rho=float(doc["rho"]),
                temperature=float(doc["temperature"]),
                n=int(doc["n"]),
                seed=int(doc["seed"]),
                created_at=str(doc["created_at"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad calibration result: {exc}") from exc
        if out.scheme not in SCHEMES:
            raise FormatError(f"unknown scheme {out.scheme!r}")
        if not 0.0 < out.alpha < 1.0:
            raise FormatError(f"alpha {out.alpha!r} outside (0, 1)")
        if not math.isinf(out.tau_star) and not math.isfinite(out.tau_star):
            raise FormatError("tau_star must be finite or the 'inf' sentinel")
        return out

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def calibrate(examples, alpha=0.1, scheme="uniform", rho=1.0, temperature=1.0,
              seed=0, created_at=""):
    """Compute the conformal threshold from calibration examples.

    ``seed`` and ``created_at`` are provenance metadata carried into the
    result unchanged; they do not affect the threshold.
    """
    n = len(examples)
    if n < 1:
        raise ValueError("need at least one calibration example")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    for ex in examples:
        ex.validate()
    scores = [ex.score for ex in examples]
    if scheme == "uniform":
        weights, test_mass = uniform_weights(n)
        rho = 1.0
    elif scheme == "feature_decay":
        raw = [ex.resolve_weight(temperature) for ex in examples]
        weights, test_mass = decay_normalize(raw, rho)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    dist = WeightedScoreDistribution.build(scores, weights, test_mass)
    tau_star = weighted_quantile(dist, Fraction(1) - Fraction(alpha))
    return CalibrationResult(
        tau_star=tau_star, alpha=alpha, scheme=scheme, rho=rho,
        temperature=temperature, n=n, seed=seed, created_at=created_at,
    )


def membership(score_value, tau_star):
    """A candidate belongs to the prediction set iff its score <= tau_star."""
    if math.isnan(score_value) or math.isnan(tau_star):
        raise ValueError("membership is undefined for NaN")
    return score_value <= tau_star


@dataclass
class PredictionSet:
    tau_star: float
    hypotheses: list  # ForwardResult per hypothesis
    scores: list  # float per hypothesis
    admitted: list  # bool per hypothesis

    @property
    def size(self):
        return sum(1 for a in self.admitted if a)


def mc_dropout_set(x, store, model_cfg, scorer_cfg, tau_star, num_hypotheses, rng):
    """Sample hypotheses by MC dropout and keep those within the threshold."""
    hyps = sample_hypotheses(x, store, model_cfg, num_hypotheses, rng, mode="mc_dropout")
    scores = [duf.score(h.phi_gl, h.y_final, store, scorer_cfg) for h in hyps]
    admitted = [membership(s, tau_star) for s in scores]
    return PredictionSet(tau_star=tau_star, hypotheses=hyps, scores=scores, admitted=admitted)


def gt_score(episode, store, model_cfg, scorer_cfg):
    """Score of the true output under the deterministic (eval) forward."""
    res = forward(episode.observations, store, model_cfg, "eval")
    return duf.score(res.phi_gl, episode.target, store, scorer_cfg)


@dataclass(frozen=True)
class CoverageReport:
    n_test: int
    covered_count: int
    coverage: float
    alpha: float
    lower_bound_used: float = None


def empirical_coverage(episodes, store, model_cfg, scorer_cfg, cal,
                       lower_bound=None):
    """Fraction of episodes whose true output the prediction set admits."""
    if not episodes:
        raise ValueError("need at least one episode")
    hits = 0
    for ep in episodes:
        if membership(gt_score(ep, store, model_cfg, scorer_cfg), cal.tau_star):
            hits += 1
    return CoverageReport(
        n_test=len(episodes),
        covered_count=hits,
        coverage=hits / len(episodes),
        alpha=cal.alpha,
        lower_bound_used=lower_bound,
    )


def save_scores(path, examples):
    """Write a calibration-score CSV: episode_id,score[,raw_weight].

    The raw_weight column is written only when every example carries one.
    """
    if not examples:
        raise ValueError("need at least one example")
    with_weights = all(ex.raw_weight is not None for ex in examples)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if with_weights:
            fh.write("episode_id,score,raw_weight\n")
            for ex in examples:
                fh.write(
                    f"{ex.episode_id},{format(ex.score, '.17g')},"
                    f"{format(ex.raw_weight, '.17g')}\n"
                )
        else:
            fh.write("episode_id,score\n")
            for ex in examples:
                fh.write(f"{ex.episode_id},{format(ex.score, '.17g')}\n")


def load_scores(path):
    """Read a calibration-score CSV; returns a list of CalibrationExample."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header == "episode_id,score,raw_weight":
            want = 3
        elif header == "episode_id,score":
            want = 2
        else:
            raise FormatError(f"{path}: unexpected header {header!r}")
        out = []
        for lineno, line in enumerate(fh, start=2):
            cells = line.rstrip("\n").split(",")
            if len(cells) != want:
                raise FormatError(f"{path}:{lineno}: expected {want} columns")
            try:
                eid = int(cells[0])
                score = float(cells[1])
                raw = float(cells[2]) if want == 3 else None
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            ex = CalibrationExample(episode_id=eid, score=score, raw_weight=raw)
            try:
                ex.validate()
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            out.append(ex)
    if not out:
        raise FormatError(f"{path}: no data rows")
    return out

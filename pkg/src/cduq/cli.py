"""Command-line interface and run manifests.

Subcommands: simulate | train | calibrate | predict | coverage | bounds |
ablate. Every run writes its primary artifacts plus one ``manifest.json``
into ``--out-dir``. The manifest records the command, the resolved
arguments, the full config snapshot, the seed, the tool version, the
creation timestamp and SHA-256 hashes of every consumed and produced
file.

``cduq --replay <manifest>`` re-runs the recorded command with the
recorded arguments, config, seed and timestamp: input hashes are verified
before the run and output hashes after, so a zero exit status proves the
byte-identical reproduction of every primary output.

Exit codes: 0 success; 2 usage or input error; 3 numeric failure;
4 verification failure (a bound check or replay comparison did not hold).

Global flags fall back to environment variables: ``--seed`` to
``CDUQ_SEED``, ``--out-dir`` to ``CDUQ_OUT_DIR`` and ``--config`` to
``CDUQ_CONFIG``. ``CDUQ_BACKEND`` selects the compute backend (see
cduq.kernels). All CSV floats are printed with 17 significant digits.
"""

import argparse
import hashlib
import json
import math
import os
import statistics
import sys
from dataclasses import replace
from datetime import datetime, timezone

from . import __version__, bounds, conformal, duf, pipeline, synth
from .errors import (
    FormatError,
    NumericRangeError,
    TrainingDivergedError,
    VerificationError,
)
from .mathcore import ParamStore, RngStream
from .model import forward

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4

MANIFEST_NAME = "manifest.json"


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _int_list(text):
    try:
        return [int(cell) for cell in text.split(",")]
    except ValueError as exc:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text):
    try:
        return [float(cell) for cell in text.split(",")]
    except ValueError as exc:
        raise ValueError(f"expected comma-separated numbers, got {text!r}") from exc


def _fmt(x):
    return format(x, ".17g")


class RunContext:
    """Resolved inputs of one command run plus collected manifest data."""

    def __init__(self, command, args, cfg, seed, out_dir, created_at):
        self.command = command
        self.args = args
        self.cfg = cfg
        self.seed = seed
        self.out_dir = out_dir
        self.created_at = created_at
        self.inputs = {}
        self.output_names = []
        self.failure = None  # deferred verification failure message

    def read_input(self, path):
        """Record an input file's hash; returns the path unchanged."""
        if not os.path.isfile(path):
            raise ValueError(f"input file not found: {path}")
        self.inputs[path] = _sha256(path)
        return path

    def out_path(self, name):
        """Register a primary output; returns its path under out_dir."""
        if name not in self.output_names:
            self.output_names.append(name)
        return os.path.join(self.out_dir, name)

    def manifest_doc(self):
        outputs = {
            name: _sha256(os.path.join(self.out_dir, name))
            for name in sorted(self.output_names)
        }
        return {
            "command": self.command,
            "tool_version": __version__,
            "seed": self.seed,
            "created_at": self.created_at,
            "args": self.args,
            "config": pipeline.config_snapshot(self.cfg),
            "inputs": self.inputs,
            "outputs": outputs,
        }

    def write_manifest(self):
        path = os.path.join(self.out_dir, MANIFEST_NAME)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(self.manifest_doc(), sort_keys=True, indent=2) + "\n")


def _load_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ValueError(f"cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    required = ("command", "tool_version", "seed", "created_at", "args",
                "config", "inputs", "outputs")
    for key in required:
        if key not in doc:
            raise FormatError(f"manifest is missing key {key!r}")
    if doc["command"] not in _COMMANDS:
        raise FormatError(f"manifest names unknown command {doc['command']!r}")
    return doc


def _episode_examples(episodes, store, model_cfg, scorer_cfg, temperature):
    """Calibration examples (score, embeddings, feature weight) per episode."""
    out = []
    for ep in episodes:
        res = forward(ep.observations, store, model_cfg, "eval")
        s = duf.score(res.phi_gl, ep.target, store, scorer_cfg)
        phi_gt = duf.embedding(res.phi_gl, ep.target, store, scorer_cfg)
        phi_pred = duf.embedding(res.phi_gl, res.y_final, store, scorer_cfg)
        raw = conformal.feature_weight(phi_pred, phi_gt, temperature)
        out.append(
            conformal.CalibrationExample(
                episode_id=ep.episode_id,
                score=s,
                raw_weight=raw,
                phi_pred=tuple(phi_pred),
                phi_gt=tuple(phi_gt),
            )
        )
    return out


# ---------------------------------------------------------------------------
# command handlers


def _cmd_simulate(ctx):
    a = ctx.args
    spec = synth.shifted_stream_spec(
        a["mode"], a["n"], a["k"], a["shift"], a["noise_scale"], a["map_seed"]
    )
    eps = synth.gen_stream(
        ctx.cfg["trajectory"], spec, RngStream(ctx.seed).derive("simulate")
    )
    synth.save_episodes(ctx.out_path("episodes.csv"), eps, ctx.cfg["trajectory"])


def _cmd_train(ctx):
    a = ctx.args
    eps = synth.load_episodes(ctx.read_input(a["episodes"]), ctx.cfg["trajectory"])
    if a["n_train"] is not None:
        if not 1 <= a["n_train"] <= len(eps):
            raise ValueError(f"--n-train must be in [1, {len(eps)}]")
        eps = eps[: a["n_train"]]
    tcfg = replace(ctx.cfg["train"], seed=ctx.seed)
    store, history = pipeline.train(eps, ctx.cfg["model"], ctx.cfg["scorer"], tcfg)
    store.save(ctx.out_path("checkpoint.json"))
    pipeline.save_history(ctx.out_path("train_log.csv"), history)


def _cmd_calibrate(ctx):
    a = ctx.args
    temperature = (
        a["temperature"] if a["temperature"] is not None else ctx.cfg["temperature"]
    )
    alpha = a["alpha"] if a["alpha"] is not None else ctx.cfg["alpha"]
    if a["scores"] is not None:
        examples = conformal.load_scores(ctx.read_input(a["scores"]))
    else:
        if a["episodes"] is None or a["checkpoint"] is None:
            raise ValueError("need either --scores or both --episodes and --checkpoint")
        eps = synth.load_episodes(ctx.read_input(a["episodes"]), ctx.cfg["trajectory"])
        store = ParamStore.load(ctx.read_input(a["checkpoint"]))
        examples = _episode_examples(
            eps, store, ctx.cfg["model"], ctx.cfg["scorer"], temperature
        )
        conformal.save_scores(ctx.out_path("scores.csv"), examples)
    cal = conformal.calibrate(
        examples,
        alpha=alpha,
        scheme=a["scheme"],
        rho=a["rho"],
        temperature=temperature,
        seed=ctx.seed,
        created_at=ctx.created_at,
    )
    cal.save(ctx.out_path("calibration.json"))


def _cmd_predict(ctx):
    a = ctx.args
    eps = synth.load_episodes(ctx.read_input(a["episodes"]), ctx.cfg["trajectory"])
    by_id = {ep.episode_id: ep for ep in eps}
    eid = a["episode_id"]
    if eid not in by_id:
        raise ValueError(f"episode {eid} not found in {a['episodes']}")
    store = ParamStore.load(ctx.read_input(a["checkpoint"]))
    cal = conformal.CalibrationResult.load(ctx.read_input(a["calibration"]))
    num = a["num_hypotheses"] if a["num_hypotheses"] is not None else ctx.cfg["h_predict"]
    if num < 1:
        raise ValueError("--num-hypotheses must be positive")
    rng = RngStream(ctx.seed).derive("predict", eid)
    pset = conformal.mc_dropout_set(
        by_id[eid].observations, store, ctx.cfg["model"], ctx.cfg["scorer"],
        cal.tau_star, num, rng,
    )
    hyps = []
    for res, s, admitted in zip(pset.hypotheses, pset.scores, pset.admitted):
        hyps.append(
            {
                "score": s,
                "member": admitted,
                "theta": {
                    "shape": list(res.y_final.theta.shape),
                    "data": res.y_final.theta.tolist(),
                },
                "beta": {
                    "shape": list(res.y_final.beta.shape),
                    "data": res.y_final.beta.tolist(),
                },
            }
        )
    doc = {
        "episode_id": eid,
        "tau_star": "inf" if math.isinf(pset.tau_star) else pset.tau_star,
        "num_hypotheses": num,
        "set_size": pset.size,
        "hypotheses": hyps,
    }
    with open(ctx.out_path("prediction.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _cmd_coverage(ctx):
    a = ctx.args
    eps = synth.load_episodes(ctx.read_input(a["episodes"]), ctx.cfg["trajectory"])
    store = ParamStore.load(ctx.read_input(a["checkpoint"]))
    cal = conformal.CalibrationResult.load(ctx.read_input(a["calibration"]))
    n_cal = a["n_cal"] if a["n_cal"] is not None else cal.n
    n_test, seeds = a["n_test"], a["seeds"]
    if n_cal < 1 or n_test < 1 or seeds < 1:
        raise ValueError("--n-cal, --n-test and --seeds must be positive")
    if n_cal + n_test > len(eps):
        raise ValueError(
            f"need at least {n_cal + n_test} episodes, file has {len(eps)}"
        )
    schemes = ("uniform", "feature_decay") if a["compare"] else (cal.scheme,)
    mcfg, scfg = ctx.cfg["model"], ctx.cfg["scorer"]
    span = len(eps) - n_cal - n_test
    rows = []
    for s in range(seeds):
        rng = RngStream(ctx.seed).derive("coverage", s)
        start = rng.randint(span + 1)
        cal_eps = eps[start : start + n_cal]
        test_eps = eps[start + n_cal : start + n_cal + n_test]
        examples = _episode_examples(cal_eps, store, mcfg, scfg, cal.temperature)
        for scheme in schemes:
            c = conformal.calibrate(
                examples,
                alpha=cal.alpha,
                scheme=scheme,
                rho=cal.rho,
                temperature=cal.temperature,
                seed=s,
                created_at=ctx.created_at,
            )
            rep = conformal.empirical_coverage(test_eps, store, mcfg, scfg, c)
            rows.append((s, scheme, rep.coverage, rep.n_test))
    with open(ctx.out_path("coverage.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("seed,scheme,coverage,n_test\n")
        for s, scheme, cov, n in rows:
            fh.write(f"{s},{scheme},{_fmt(cov)},{n}\n")
        for scheme in schemes:
            vals = [cov for _, sch, cov, _ in rows if sch == scheme]
            mean = statistics.mean(vals)
            std = statistics.stdev(vals) if len(vals) > 1 else 0.0
            fh.write(f"mean,{scheme},{_fmt(mean)},{n_test}\n")
            fh.write(f"std,{scheme},{_fmt(std)},{n_test}\n")


def _cmd_bounds(ctx):
    a = ctx.args
    ns = _int_list(a["n_list"])
    ks = _int_list(a["k_list"])
    fracs = _float_list(a["a1_list"])
    rho = a["rho"]
    failures = 0
    with open(ctx.out_path("bounds.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            "n,k,a1,a2,tv_numeric,hellinger,beta_bound,changepoint_bound,holds\n"
        )
        for row in bounds.bounds_grid(ns, ks, fracs=fracs):
            cp = bounds.changepoint_gap_bound(rho, row["k"])
            failures += 0 if row["holds"] else 1
            fh.write(
                f"{row['n']},{row['k']},{_fmt(row['a1'])},{_fmt(row['a2'])},"
                f"{_fmt(row['tv_numeric'])},{_fmt(row['hellinger'])},"
                f"{_fmt(row['beta_bound'])},{_fmt(cp)},"
                f"{'true' if row['holds'] else 'false'}\n"
            )
    if failures:
        ctx.failure = f"{failures} grid cell(s) violate the Beta gap bound"


def _cmd_ablate(ctx):
    a = ctx.args
    eps = synth.load_episodes(ctx.read_input(a["episodes"]), ctx.cfg["trajectory"])
    n_train, n_eval = a["n_train"], a["n_eval"]
    if n_train < 1 or n_eval < 1:
        raise ValueError("--n-train and --n-eval must be positive")
    if n_train + n_eval > len(eps):
        raise ValueError(
            f"need at least {n_train + n_eval} episodes, file has {len(eps)}"
        )
    h_values = _int_list(a["h_values"])
    seeds = _int_list(a["seeds"])
    rows = pipeline.ablate_h(
        eps[:n_train],
        eps[n_train : n_train + n_eval],
        ctx.cfg["model"],
        ctx.cfg["scorer"],
        ctx.cfg["train"],
        h_values,
        seeds,
    )
    pipeline.save_ablation(ctx.out_path("ablation.csv"), rows)


# ---------------------------------------------------------------------------
# argument table and dispatch

_ARG_SPECS = {
    "simulate": [
        ("mode", dict(default="iid", choices=("iid", "changepoint"),
                      help="stream mode")),
        ("n", dict(type=int, default=100, help="number of episodes")),
        ("k", dict(type=int, default=0,
                   help="episodes per segment (changepoint mode)")),
        ("shift", dict(type=float, default=0.0,
                       help="observation-map delta of the shifted regime")),
        ("noise_scale", dict(type=float, default=1.0,
                             help="noise multiplier of the shifted regime")),
        ("map_seed", dict(type=int, default=0, help="observation-map seed")),
    ],
    "train": [
        ("episodes", dict(required=True, help="episode CSV")),
        ("n_train", dict(type=int, default=None,
                         help="use only the first N episodes")),
    ],
    "calibrate": [
        ("scores", dict(default=None,
                        help="scores CSV (episode_id,score[,raw_weight])")),
        ("episodes", dict(default=None, help="calibration episode CSV")),
        ("checkpoint", dict(default=None, help="trained checkpoint JSON")),
        ("scheme", dict(default="uniform", choices=conformal.SCHEMES,
                        help="weight scheme")),
        ("alpha", dict(type=float, default=None,
                       help="miscoverage level (default: config alpha)")),
        ("rho", dict(type=float, default=1.0, help="decay factor")),
        ("temperature", dict(type=float, default=None,
                             help="feature-weight temperature (default: config)")),
    ],
    "predict": [
        ("episodes", dict(required=True, help="episode CSV")),
        ("checkpoint", dict(required=True, help="trained checkpoint JSON")),
        ("calibration", dict(required=True, help="calibration JSON")),
        ("episode_id", dict(type=int, required=True, help="episode to predict")),
        ("num_hypotheses", dict(type=int, default=None,
                                help="hypothesis count (default: config)")),
    ],
    "coverage": [
        ("episodes", dict(required=True, help="episode CSV")),
        ("checkpoint", dict(required=True, help="trained checkpoint JSON")),
        ("calibration", dict(required=True,
                             help="calibration JSON (recipe for re-calibration)")),
        ("n_cal", dict(type=int, default=None,
                       help="calibration block size (default: recipe n)")),
        ("n_test", dict(type=int, default=500, help="test block size")),
        ("seeds", dict(type=int, default=20, help="number of split seeds")),
        ("compare", dict(action="store_true",
                         help="emit both uniform and feature_decay rows")),
    ],
    "bounds": [
        ("n_list", dict(default="50,100,200", help="comma-separated n values")),
        ("k_list", dict(default="0,1,2,5,10", help="comma-separated k values")),
        ("a1_list", dict(default="0.25,0.5,0.75",
                         help="comma-separated a1 fractions of n")),
        ("rho", dict(type=float, default=0.99,
                     help="decay factor for the changepoint bound column")),
    ],
    "ablate": [
        ("episodes", dict(required=True, help="episode CSV")),
        ("h_values", dict(default="1,8",
                          help="comma-separated hypothesis counts")),
        ("seeds", dict(default="0,1,2,3,4", help="comma-separated seeds")),
        ("n_train", dict(type=int, default=120, help="training episodes")),
        ("n_eval", dict(type=int, default=40, help="evaluation episodes")),
    ],
}

_COMMANDS = {
    "simulate": (_cmd_simulate, "generate a synthetic episode stream"),
    "train": (_cmd_train, "train the estimator and scorer"),
    "calibrate": (_cmd_calibrate, "compute the conformal threshold"),
    "predict": (_cmd_predict, "build a prediction set for one episode"),
    "coverage": (_cmd_coverage, "measure empirical coverage over seeds"),
    "bounds": (_cmd_bounds, "verify the Beta gap bound over a grid"),
    "ablate": (_cmd_ablate, "sweep training hypothesis counts"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="run seed (env CDUQ_SEED, default 0)")
    common.add_argument("--out-dir", default=argparse.SUPPRESS,
                        help="artifact directory (env CDUQ_OUT_DIR, default .)")
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON config overrides (env CDUQ_CONFIG)")
    parser = argparse.ArgumentParser(
        prog="cduq",
        parents=[common],
        description="uncertainty-calibrated trajectory prediction toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--replay", metavar="MANIFEST", default=None,
                        help="re-run a recorded manifest and verify outputs")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        for arg_name, kwargs in _ARG_SPECS[name]:
            p.add_argument("--" + arg_name.replace("_", "-"), **kwargs)
    return parser


def _resolve_globals(ns):
    seed = getattr(ns, "seed", None)
    if seed is None:
        seed = int(os.environ.get("CDUQ_SEED", "0"))
    out_dir = getattr(ns, "out_dir", None) or os.environ.get("CDUQ_OUT_DIR") or "."
    config_path = getattr(ns, "config", None) or os.environ.get("CDUQ_CONFIG")
    overrides = {}
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                overrides = json.load(fh)
        except OSError as exc:
            raise ValueError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(overrides, dict):
            raise FormatError("config JSON must be an object")
    return seed, out_dir, overrides


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _run_command(ns):
    seed, out_dir, overrides = _resolve_globals(ns)
    cfg = pipeline.apply_overrides(pipeline.default_config(), overrides)
    args = {name: getattr(ns, name) for name, _ in _ARG_SPECS[ns.command]}
    os.makedirs(out_dir, exist_ok=True)
    ctx = RunContext(ns.command, args, cfg, seed, out_dir, _now())
    handler, _ = _COMMANDS[ns.command]
    handler(ctx)
    ctx.write_manifest()
    if ctx.failure:
        raise VerificationError(ctx.failure)
    return EXIT_OK


def _run_replay(ns):
    doc = _load_manifest(ns.replay)
    if doc["tool_version"] != __version__:
        print(
            f"cduq: warning: manifest from version {doc['tool_version']}, "
            f"running {__version__}",
            file=sys.stderr,
        )
    for path, digest in doc["inputs"].items():
        if not os.path.isfile(path):
            raise VerificationError(f"recorded input missing: {path}")
        actual = _sha256(path)
        if actual != digest:
            raise VerificationError(f"input hash mismatch for {path}")
    known = {name for name, _ in _ARG_SPECS[doc["command"]]}
    unknown = set(doc["args"]) - known
    if unknown:
        raise FormatError(f"manifest args contain unknown keys {sorted(unknown)}")
    args = {name: doc["args"].get(name) for name in known}
    cfg = pipeline.apply_overrides(pipeline.default_config(), doc["config"])
    out_dir = getattr(ns, "out_dir", None) or os.path.dirname(ns.replay) or "."
    os.makedirs(out_dir, exist_ok=True)
    ctx = RunContext(
        doc["command"], args, cfg, int(doc["seed"]), out_dir, doc["created_at"]
    )
    handler, _ = _COMMANDS[doc["command"]]
    handler(ctx)
    for name, digest in doc["outputs"].items():
        path = os.path.join(out_dir, name)
        if not os.path.isfile(path):
            raise VerificationError(f"replay produced no output {name}")
        if _sha256(path) != digest:
            raise VerificationError(f"output hash mismatch for {name}")
    ctx.write_manifest()
    if ctx.failure:
        raise VerificationError(ctx.failure)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        if ns.replay is not None:
            return _run_replay(ns)
        if ns.command is None:
            parser.print_usage(sys.stderr)
            print("cduq: error: a command or --replay is required", file=sys.stderr)
            return EXIT_USAGE
        return _run_command(ns)
    except (FormatError, ValueError, OSError) as exc:
        print(f"cduq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"cduq: numeric failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericRangeError as exc:
        print(f"cduq: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationError as exc:
        print(f"cduq: verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())

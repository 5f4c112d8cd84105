"""Synthetic pose-shape trajectory generator.

An episode is a smooth latent trajectory (a random low-frequency harmonic
series per latent dimension) observed through a regime-specific linear map
plus Gaussian noise, with random frames occluded (their observation rows
zeroed). Streams concatenate episodes; in changepoint mode the regime
switches every ``k`` episodes, cycling through the configured regime list,
so regimes reappear periodically.

Randomness is split per purpose: regime maps derive from
``StreamSpec.map_seed`` only, so two streams with different episode seeds
but the same map_seed share the same observation model (a model trained on
one transfers to the other). Episode draws come from the stream passed to
``gen_stream``, one derived child per episode, with a fixed draw order
(amplitudes, phases, observation noise, occlusion).
"""

import math
from array import array
from dataclasses import dataclass

from . import kernels
from .errors import FormatError
from .mathcore import RngStream, Tensor
from .model import PoseShapeOutput

_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class TrajectorySpec:
    num_frames: int = 16
    d_theta: int = 12
    d_beta: int = 4
    obs_dim: int = 24
    obs_noise_sigma: float = 0.05
    occlusion_rate: float = 0.1
    num_harmonics: int = 3

    @property
    def latent_dim(self):
        return self.d_theta + self.d_beta

    def validate(self):
        if self.num_frames < 2:
            raise ValueError("need at least 2 frames")
        if min(self.d_theta, self.d_beta, self.obs_dim, self.num_harmonics) < 1:
            raise ValueError("dimensions must be positive")
        if self.obs_noise_sigma < 0:
            raise ValueError("obs_noise_sigma must be non-negative")
        if not 0.0 <= self.occlusion_rate < 1.0:
            raise ValueError("occlusion_rate must be in [0, 1)")


@dataclass(frozen=True)
class RegimeShift:
    """Perturbation of the base observation model for one regime."""

    map_delta: float = 0.0
    noise_scale: float = 1.0


@dataclass(frozen=True)
class Regime:
    """Materialized observation model: obs_row = latent_row @ matrix + noise."""

    matrix: Tensor  # [latent_dim, obs_dim]
    noise_sigma: float

    @classmethod
    def identity(cls, spec):
        """Noiseless identity map; requires obs_dim == latent_dim."""
        d = spec.latent_dim
        if spec.obs_dim != d:
            raise ValueError("identity regime requires obs_dim == latent_dim")
        data = array("d", bytes(8 * d * d))
        for i in range(d):
            data[i * d + i] = 1.0
        return cls(matrix=Tensor((d, d), data), noise_sigma=0.0)


@dataclass(frozen=True)
class StreamSpec:
    mode: str = "iid"  # "iid" | "changepoint"
    n: int = 100
    k: int = 0  # episodes per segment in changepoint mode
    regimes: tuple = (RegimeShift(),)
    map_seed: int = 0

    def validate(self):
        if self.mode not in ("iid", "changepoint"):
            raise ValueError(f"unknown stream mode {self.mode!r}")
        if self.n < 1:
            raise ValueError("stream must contain at least one episode")
        if self.mode == "changepoint":
            if self.k < 1:
                raise ValueError("changepoint mode requires k >= 1")
            if not self.regimes:
                raise ValueError("changepoint mode requires at least one regime")

    def regime_id_of(self, index):
        """Segment index of episode ``index`` (0 in iid mode)."""
        return 0 if self.mode == "iid" else index // self.k


@dataclass
class Episode:
    episode_id: int
    regime_id: int
    observations: Tensor  # [num_frames, obs_dim]
    target: PoseShapeOutput
    occluded: tuple  # bool per frame


def _gauss_matrix(shape, scale, rng):
    data = rng.gaussians(shape[0] * shape[1])
    kernels.vscale(data, scale, data)
    return Tensor(shape, data)


def make_regime(traj, shift, regime_index, map_seed):
    """Materialize one regime's observation map from the map seed.

    The base map is shared by every regime; a regime adds ``map_delta``
    times an independent perturbation matrix, so regimes with the same
    index are identical across streams with equal map seeds.
    """
    d, m = traj.latent_dim, traj.obs_dim
    root = RngStream(map_seed)
    scale = 1.0 / math.sqrt(d)
    base = _gauss_matrix((d, m), scale, root.derive("base_map"))
    matrix = base
    if shift.map_delta != 0.0:
        pert = _gauss_matrix((d, m), scale, root.derive("perturbation", regime_index))
        delta = array("d", bytes(8 * d * m))
        kernels.vscale(pert.data, shift.map_delta, delta)
        out = array("d", bytes(8 * d * m))
        kernels.vadd(base.data, delta, out)
        matrix = Tensor((d, m), out)
    return Regime(matrix=matrix, noise_sigma=traj.obs_noise_sigma * shift.noise_scale)


def gen_latent(traj, rng):
    """Latent trajectory [num_frames, latent_dim] as a flat array.

    Each dimension is a sum of ``num_harmonics`` sinusoids with Gaussian
    amplitudes shrinking as 1/h and uniform phases; amplitude scales are
    normalized so the phase-averaged variance per entry is 0.5.
    """
    t_count, d, nh = traj.num_frames, traj.latent_dim, traj.num_harmonics
    norm = math.sqrt(sum(1.0 / (h * h) for h in range(1, nh + 1)))
    amps = rng.gaussians(d * nh)
    phases = rng.uniforms(d * nh)
    out = array("d", bytes(8 * t_count * d))
    for dim in range(d):
        for h in range(1, nh + 1):
            a = amps[dim * nh + h - 1] * (1.0 / h) / norm
            phi = phases[dim * nh + h - 1] * _TWO_PI
            w = _TWO_PI * h / t_count
            for t in range(t_count):
                out[t * d + dim] += a * math.sin(w * t + phi)
    return out


def _latent_to_target(latent, traj):
    t_count, d = traj.num_frames, traj.latent_dim
    flipped = array("d", bytes(8 * t_count * d))
    kernels.transpose(latent, flipped, t_count, d)
    split = traj.d_theta * t_count
    return PoseShapeOutput(
        theta=Tensor((traj.d_theta, t_count), flipped[:split]),
        beta=Tensor((traj.d_beta, t_count), flipped[split:]),
    )


def gen_episode(traj, regime, rng, episode_id=0, regime_id=0):
    """One episode under a materialized regime.

    Draw order (fixed, part of the reproducibility contract): harmonic
    amplitudes, phases, observation noise, occlusion uniforms.
    """
    traj.validate()
    t_count, d, m = traj.num_frames, traj.latent_dim, traj.obs_dim
    latent = gen_latent(traj, rng)
    obs = array("d", bytes(8 * t_count * m))
    kernels.matmul(latent, regime.matrix.data, obs, t_count, d, m)
    noise = rng.gaussians(t_count * m)
    if regime.noise_sigma != 0.0:
        kernels.vscale(noise, regime.noise_sigma, noise)
        kernels.vadd(obs, noise, obs)
    occl_u = rng.uniforms(t_count)
    occluded = tuple(u < traj.occlusion_rate for u in occl_u)
    for t, occ in enumerate(occluded):
        if occ:
            obs[t * m : (t + 1) * m] = array("d", bytes(8 * m))
    return Episode(
        episode_id=episode_id,
        regime_id=regime_id,
        observations=Tensor((t_count, m), obs),
        target=_latent_to_target(latent, traj),
        occluded=occluded,
    )


def gen_stream(traj, stream, rng):
    """Episode list for a stream spec; see module docstring for seeding."""
    traj.validate()
    stream.validate()
    regime_cache = {}
    episodes = []
    for i in range(stream.n):
        rid = stream.regime_id_of(i)
        slot = rid % len(stream.regimes)
        if slot not in regime_cache:
            regime_cache[slot] = make_regime(traj, stream.regimes[slot], slot, stream.map_seed)
        episodes.append(
            gen_episode(traj, regime_cache[slot], rng.derive("episode", i), i, rid)
        )
    return episodes


def corrupt_output(target, sigma, rng):
    """Additive Gaussian corruption of a pose-shape output (theta then beta)."""
    sigma = float(sigma)

    def jitter(t):
        noise = rng.gaussians(t.size)
        kernels.vscale(noise, sigma, noise)
        out = array("d", bytes(8 * t.size))
        kernels.vadd(t.data, noise, out)
        return Tensor(t.shape, out)

    return PoseShapeOutput(theta=jitter(target.theta), beta=jitter(target.beta))


def _header(traj):
    cols = ["episode_id", "frame", "regime_id", "occluded"]
    cols += [f"obs_{i}" for i in range(traj.obs_dim)]
    cols += [f"theta_{i}" for i in range(traj.d_theta)]
    cols += [f"beta_{i}" for i in range(traj.d_beta)]
    return cols


def save_episodes(path, episodes, traj):
    """Write episodes as one CSV row per frame (UTF-8, LF, 17-digit floats)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(_header(traj)) + "\n")
        for ep in episodes:
            t_count, m = ep.observations.shape
            for t in range(t_count):
                cells = [
                    str(ep.episode_id),
                    str(t),
                    str(ep.regime_id),
                    "1" if ep.occluded[t] else "0",
                ]
                row = ep.observations.data[t * m : (t + 1) * m]
                cells += [format(x, ".17g") for x in row]
                th = ep.target.theta
                cells += [format(th.data[d * t_count + t], ".17g") for d in range(th.shape[0])]
                be = ep.target.beta
                cells += [format(be.data[d * t_count + t], ".17g") for d in range(be.shape[0])]
                fh.write(",".join(cells) + "\n")


def load_episodes(path, traj):
    """Read a CSV written by ``save_episodes``; validates layout against the spec."""
    traj.validate()
    t_count, m = traj.num_frames, traj.obs_dim
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split(",") != _header(traj):
            raise FormatError(f"{path}: header does not match trajectory spec")
        episodes = []
        current = None  # (id, regime_id, next_frame, obs, theta, beta, occl)
        for lineno, line in enumerate(fh, start=2):
            cells = line.rstrip("\n").split(",")
            if len(cells) != 4 + m + traj.d_theta + traj.d_beta:
                raise FormatError(f"{path}:{lineno}: wrong column count")
            try:
                eid, frame, rid = int(cells[0]), int(cells[1]), int(cells[2])
                occ = cells[3]
                values = [float(c) for c in cells[4:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if occ not in ("0", "1"):
                raise FormatError(f"{path}:{lineno}: occluded must be 0 or 1")
            if current is None or eid != current[0]:
                if current is not None:
                    episodes.append(_finish_episode(current, traj, path))
                current = [eid, rid, 0, array("d"), array("d"), array("d"), []]
            if frame != current[2]:
                raise FormatError(f"{path}:{lineno}: expected frame {current[2]}, got {frame}")
            if rid != current[1]:
                raise FormatError(f"{path}:{lineno}: regime_id changed mid-episode")
            current[2] += 1
            current[3].extend(values[:m])
            current[4].extend(values[m : m + traj.d_theta])
            current[5].extend(values[m + traj.d_theta :])
            current[6].append(occ == "1")
        if current is not None:
            episodes.append(_finish_episode(current, traj, path))
    return episodes


def _finish_episode(current, traj, path):
    eid, rid, frames, obs, theta_rows, beta_rows, occl = current
    t_count = traj.num_frames
    if frames != t_count:
        raise FormatError(f"{path}: episode {eid} has {frames} frames, expected {t_count}")
    theta = array("d", bytes(8 * traj.d_theta * t_count))
    kernels.transpose(theta_rows, theta, t_count, traj.d_theta)
    beta = array("d", bytes(8 * traj.d_beta * t_count))
    kernels.transpose(beta_rows, beta, t_count, traj.d_beta)
    return Episode(
        episode_id=eid,
        regime_id=rid,
        observations=Tensor((t_count, traj.obs_dim), obs),
        target=PoseShapeOutput(
            theta=Tensor((traj.d_theta, t_count), theta),
            beta=Tensor((traj.d_beta, t_count), beta),
        ),
        occluded=tuple(occl),
    )


def shifted_stream_spec(mode, n, k=0, shift_delta=0.0, noise_scale=1.0, map_seed=0):
    """Convenience spec: base regime alternating with one shifted regime."""
    if mode == "iid":
        regimes = (RegimeShift(),)
    else:
        regimes = (RegimeShift(), RegimeShift(map_delta=shift_delta, noise_scale=noise_scale))
    return StreamSpec(mode=mode, n=n, k=k, regimes=regimes, map_seed=map_seed)

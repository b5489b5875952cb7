"""Synthetic spatio-temporal processes with closed-form covariances."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .errors import BadInputError
from .estimators import GridMapping, SampleSet
from .io import FrameTensor
from .linalg import Dims


@dataclass
class SynthClips:
    """Generated clips (one per column) and their population covariance.

    ``factors`` lists Kronecker terms of the population covariance when it
    has that form; for flow clips they live on the padded grid of
    ``mapping``.
    """

    samples: SampleSet
    clips: np.ndarray
    covariance: np.ndarray
    factors: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    mapping: Optional[GridMapping] = None


def _grid(height: int, width: int):
    r, c = np.meshgrid(np.arange(height, dtype=float), np.arange(width, dtype=float), indexing="ij")
    return r.ravel(), c.ravel()


def wave_fields(height: int, width: int, h_spec: str = "bump", g_spec: str = "linear",
                amplitude: float = 1.0, wavenumber: float = 0.8) -> Tuple[np.ndarray, np.ndarray]:
    """Amplitude ``h`` and phase ``g`` per pixel (row-major)."""
    r, c = _grid(height, width)
    rc, cc = (height - 1) / 2, (width - 1) / 2
    if h_spec == "constant":
        h = np.full(r.size, amplitude)
    elif h_spec == "bump":
        s = max(height, width) / 2
        h = amplitude * np.exp(-((r - rc) ** 2 + (c - cc) ** 2) / (2 * s * s))
    else:
        raise BadInputError(f"unknown amplitude profile {h_spec!r}")
    if g_spec == "linear":
        g = wavenumber * (c + 0.5 * r)
    elif g_spec == "radial":
        g = wavenumber * np.hypot(r - rc, c - cc)
    else:
        raise BadInputError(f"unknown phase profile {g_spec!r}")
    return h, g


def traveling_wave_covariance(h: np.ndarray, g: np.ndarray, frames: int, c: float,
                              noise_sd: float = 0.0):
    """Covariance of ``h sin(g - c t + phase)`` with uniform random phase."""
    t = np.arange(frames, dtype=float)
    lag = t[:, None] - t[None, :]
    dg = g[:, None] - g[None, :]
    hh = 0.5 * np.outer(h, h)
    factors = [(np.cos(c * lag), hh * np.cos(dg))]
    if c != 0:
        factors.append((np.sin(c * lag), hh * np.sin(dg)))
    cov = sum(np.kron(a, b) for a, b in factors)
    if noise_sd > 0:
        cov = cov + noise_sd ** 2 * np.eye(cov.shape[0])
    return cov, factors


def synth_traveling_wave(height: int, width: int, frames: int, h_spec: str = "bump",
                         g_spec: str = "linear", c: float = 0.6, noise_sd: float = 0.1,
                         n_clips: int = 1000, seed: int = 0, amplitude: float = 1.0,
                         wavenumber: float = 0.8) -> SynthClips:
    """Clips of a traveling wave with a random phase per clip plus white noise."""
    if n_clips < 1:
        raise BadInputError("n_clips must be >= 1")
    rng = np.random.default_rng(seed)
    h, g = wave_fields(height, width, h_spec, g_spec, amplitude, wavenumber)
    t = np.arange(frames, dtype=float)
    phase = rng.uniform(0.0, 2 * np.pi, n_clips)
    arg = g[None, :, None] - c * t[:, None, None] + phase[None, None, :]
    clips = (h[None, :, None] * np.sin(arg)).reshape(frames * h.size, n_clips)
    if noise_sd > 0:
        clips = clips + noise_sd * rng.standard_normal(clips.shape)
    cov, factors = traveling_wave_covariance(h, g, frames, c, noise_sd)
    dims = Dims(frames, h.size)
    return SynthClips(SampleSet.from_clips(clips, dims), clips, cov, factors)


def gaussian_kernel(height: int, width: int, length: float, nugget: float = 0.0) -> np.ndarray:
    r, c = _grid(height, width)
    d2 = (r[:, None] - r[None, :]) ** 2 + (c[:, None] - c[None, :]) ** 2
    return np.exp(-d2 / (2 * length * length)) + nugget * np.eye(r.size)


def ar1_matrix(frames: int, rho: float) -> np.ndarray:
    t = np.arange(frames)
    return rho ** np.abs(t[:, None] - t[None, :])


def synth_flow(height: int, width: int, frames: int, delta_n: int, n_clips: int = 1000,
               seed: int = 0, rho: float = 0.8, length: float = 1.5,
               nugget: float = 0.05) -> SynthClips:
    """Separable field on the padded grid, seen through a window drifting ``delta_n`` columns per frame.

    Frame ``f`` shows padded columns ``offset(f) .. offset(f) + width``, so
    embedding with the returned mapping makes the covariance exactly one
    Kronecker product.
    """
    if abs(delta_n) * (frames - 1) >= width:
        raise BadInputError("|delta_n| * (frames - 1) must be smaller than the width")
    mapping = GridMapping(delta_n, height, width, frames)
    a = ar1_matrix(frames, rho)
    b = gaussian_kernel(height, mapping.padded_width, length, nugget)
    rng = np.random.default_rng(seed)
    la, lb = np.linalg.cholesky(a), np.linalg.cholesky(b)
    z = np.einsum("ij,kl,jlc->ikc", la, lb, rng.standard_normal((frames, b.shape[0], n_clips)))
    z = z.reshape(frames * b.shape[0], n_clips)
    idx = mapping.valid_index()
    clips = z[idx]
    cov = np.kron(a, b)[np.ix_(idx, idx)]
    dims = Dims(frames, mapping.base_n)
    return SynthClips(SampleSet.from_clips(clips, dims), clips, cov, [(a, b)], mapping)


def synth_flow_video(height: int, width: int, frames_total: int, delta_n: int = 1,
                     seed: int = 0, rho: float = 0.8, length: float = 1.5,
                     nugget: float = 0.05, mean: float = 0.5, scale: float = 0.1) -> FrameTensor:
    """Long tape of a field drifting ``delta_n`` columns per frame.

    A strip wide enough for the whole tape evolves as a spatially smooth
    AR(1) process; frame ``t`` shows strip columns starting at
    ``delta_n * t`` (shifted to be nonnegative).  Any window of ``T`` frames
    is distributed like :func:`synth_flow` clips.
    """
    if delta_n == 0:
        strip = width
    else:
        strip = width + abs(delta_n) * (frames_total - 1)
    rng = np.random.default_rng(seed)
    lb = np.linalg.cholesky(gaussian_kernel(height, strip, length, nugget))
    innov = np.sqrt(1 - rho * rho)
    z = lb @ rng.standard_normal(lb.shape[0])
    out = np.empty((frames_total, height, width))
    for t in range(frames_total):
        if t:
            z = rho * z + innov * (lb @ rng.standard_normal(lb.shape[0]))
        start = delta_n * t if delta_n >= 0 else abs(delta_n) * (frames_total - 1 - t)
        out[t] = z.reshape(height, strip)[:, start:start + width]
    return FrameTensor(mean + scale * out, f"synth flow delta_n={delta_n} seed={seed}")


@dataclass(frozen=True)
class EscapeComponent:
    """One smooth field evolving as ``x_{t+1} = rho W x_t + w``."""

    rho: float
    length: float
    amplitude: float


@dataclass(frozen=True)
class EscapeRegime:
    components: Tuple[EscapeComponent, ...]
    outward: bool
    noise_sd: float


_WANDER = (EscapeComponent(0.8, 2.5, 1.0), EscapeComponent(0.3, 1.0, 0.6))

ESCAPE_MODES = {
    # pre-switch wander, post-switch behaviour
    "escape": (EscapeRegime(_WANDER, False, 0.3),
               EscapeRegime((EscapeComponent(0.7, 1.0, 1.3),), True, 0.3)),
    # flipping the sign of every rho keeps each frame's covariance
    "dynamics": (EscapeRegime(_WANDER, False, 0.3),
                 EscapeRegime(tuple(EscapeComponent(-c.rho, c.length, c.amplitude) for c in _WANDER),
                              False, 0.3)),
}


def outward_shift(height: int, width: int) -> np.ndarray:
    """Each pixel copies its neighbour one step closer to the frame centre."""
    rc, cc = (height - 1) / 2, (width - 1) / 2
    w = np.zeros((height * width, height * width))
    for r in range(height):
        for c in range(width):
            sr = r - int(np.sign(r - rc)) if abs(r - rc) >= 1 else r
            sc = c - int(np.sign(c - cc)) if abs(c - cc) >= 1 else c
            w[r * width + c, sr * width + sc] = 1.0
    return w


def _component_system(height: int, width: int, comp: EscapeComponent, outward: bool,
                      nugget: float = 0.05):
    k = comp.amplitude ** 2 * gaussian_kernel(height, width, comp.length, nugget)
    w = outward_shift(height, width) if outward else np.eye(height * width)
    return comp.rho * w, (1 - comp.rho ** 2) * k


def lds_covariance(f: np.ndarray, q: np.ndarray, frames: int) -> np.ndarray:
    """Stationary space-time covariance of ``x_{t+1} = F x_t + w``, ``Cov(w) = Q``."""
    s0 = solve_discrete_lyapunov(f, q)
    n = f.shape[0]
    out = np.zeros((frames * n, frames * n))
    lagged = [s0]
    for _ in range(1, frames):
        lagged.append(f @ lagged[-1])
    for i in range(frames):
        for j in range(frames):
            blk = lagged[i - j] if i >= j else lagged[j - i].T
            out[i * n:(i + 1) * n, j * n:(j + 1) * n] = blk
    return 0.5 * (out + out.T)


def escape_covariances(height: int, width: int, frames: int, mode: str = "escape",
                       scale: float = 0.1) -> Tuple[np.ndarray, np.ndarray]:
    """Population space-time covariances before and after the switch."""
    if mode not in ESCAPE_MODES:
        raise BadInputError(f"unknown escape mode {mode!r}")
    out = []
    for reg in ESCAPE_MODES[mode]:
        cov = reg.noise_sd ** 2 * np.eye(frames * height * width)
        for comp in reg.components:
            f, q = _component_system(height, width, comp, reg.outward)
            cov = cov + lds_covariance(f, q, frames)
        out.append(scale ** 2 * cov)
    return out[0], out[1]


def synth_escape(height: int = 16, width: int = 16, frames_total: int = 240,
                 switch_frame: int = 200, seed: int = 0, mode: str = "escape",
                 mean: float = 0.5, scale: float = 0.1) -> Tuple[FrameTensor, np.ndarray]:
    """Slow wander that switches to a different regime at ``switch_frame``.

    Frames are a sum of smooth autoregressive fields plus white sensor
    noise.  ``mode='escape'`` switches to a single fast, rougher and
    stronger field flowing outward from the centre; ``mode='dynamics'``
    keeps every frame's covariance and only reverses the sign of the
    temporal correlation.  Returns the tensor and per-frame labels
    (1 = anomalous).
    """
    if not 0 < switch_frame < frames_total:
        raise BadInputError("switch_frame must lie inside the tape")
    if mode not in ESCAPE_MODES:
        raise BadInputError(f"unknown escape mode {mode!r}")
    rng = np.random.default_rng(seed)
    n = height * width
    regimes = ESCAPE_MODES[mode]
    systems = [[_component_system(height, width, c, reg.outward) for c in reg.components]
               for reg in regimes]
    chols = [[np.linalg.cholesky(q) for _, q in sys_] for sys_ in systems]
    states = [np.linalg.cholesky(solve_discrete_lyapunov(f, q)) @ rng.standard_normal(n)
              for f, q in systems[0]]
    out = np.empty((frames_total, n))
    for t in range(frames_total):
        k = 0 if t < switch_frame else 1
        if t == switch_frame and len(systems[1]) != len(states):
            # the new regime starts from its own stationary state
            states = [np.linalg.cholesky(solve_discrete_lyapunov(f, q)) @ rng.standard_normal(n)
                      for f, q in systems[1]]
        elif t:
            states = [f @ x + c @ rng.standard_normal(n)
                      for (f, _), c, x in zip(systems[k], chols[k], states)]
        out[t] = sum(states) + regimes[k].noise_sd * rng.standard_normal(n)
    labels = (np.arange(frames_total) >= switch_frame).astype(int)
    data = mean + scale * out.reshape(frames_total, height, width)
    return FrameTensor(data, f"synth escape mode={mode} seed={seed}"), labels

"""Phase congruency (1-D and 2-D), moment maps and keypoint detection.

The 2-D construction is the usual log-Gabor quadrature bank: radial log-Gabor
gain times a cosine angular spread, applied in the frequency domain.  Each
orientation gets its own congruency map

    PC_o = max(E_o - T_o, 0) / (sum_s A_so + eps)

where ``E_o`` is the local energy (modulus of the scale-summed complex
response), ``A_so`` the per-scale amplitudes and ``T_o`` an optional noise
floor.  A sigmoid of the frequency spread scales each map down where only
one or two scales respond, which keeps filter ringing far from a feature
from scoring as congruent.  Corners come from the minimum moment of the orientation-weighted
congruency covariance, edges from the maximum moment.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import fft

from . import kernels
from .errors import DimensionMismatch, InvalidBankParams, SignalTooShort
from .imaging import GrayImage

# eval_pc_point guard
POINT_EPS = 1e-12
# PC denominators use eps = REL_EPS * (mean summed amplitude) + ABS_EPS so the
# maps are exactly invariant to intensity scaling
REL_EPS = 1e-3
ABS_EPS = 1e-12
NOISE_K = 2.0
# frequency-spread weighting: points where few scales respond are damped
SPREAD_CUTOFF = 0.5
SPREAD_GAIN = 10.0


# --------------------------------------------------------------------- 1-D

@dataclass(frozen=True)
class FourierComponentSet:
    amplitudes: np.ndarray
    phases: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.amplitudes, dtype=np.float64))
        p = np.atleast_1d(np.asarray(self.phases, dtype=np.float64))
        if a.shape != p.shape or a.ndim != 1 or a.size == 0:
            raise ValueError("need matching, non-empty amplitude and phase lists")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ValueError("amplitudes must be finite and non-negative")
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "phases", p)

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        return cls([a for a, _ in pairs], [p for _, p in pairs])


def eval_pc_point(comps: FourierComponentSet) -> float:
    """Phase congruency of a single point.

    The maximum over the mean phase of ``sum A_n cos(phi_n - phibar) / sum A_n``
    is attained at the argument of ``sum A_n exp(i phi_n)``, so it reduces to the
    modulus of that sum over the total amplitude.
    """
    a, p = comps.amplitudes, comps.phases
    energy = abs(np.sum(a * np.exp(1j * p)))
    return float(min(energy / (a.sum() + POINT_EPS), 1.0))


@dataclass(frozen=True)
class SyntheticSignalSpec:
    f0: float
    amplitudes: tuple
    phase0: float = 0.0

    def __post_init__(self):
        amps = tuple(float(a) for a in self.amplitudes)
        if not self.f0 > 0:
            raise ValueError("f0 must be positive")
        if len(amps) < 1:
            raise ValueError("need at least one component")
        object.__setattr__(self, "amplitudes", amps)

    @property
    def n_components(self) -> int:
        return len(self.amplitudes)


def synth_signal(spec: SyntheticSignalSpec, t) -> np.ndarray:
    """Sum of harmonics ``A_n sin(2 pi n f0 t + phase0)``, n = 1..N."""
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    for n, amp in enumerate(spec.amplitudes, start=1):
        if amp:
            out += amp * np.sin(2.0 * np.pi * n * spec.f0 * t + spec.phase0)
    return out


@dataclass(frozen=True)
class BankParams:
    n_scales: int = 4
    n_orientations: int = 6
    min_wavelength: float = 3.0
    scale_mult: float = 2.1
    sigma_ratio: float = 0.55

    def validate(self, dims: int = 2):
        if self.n_scales < 2:
            raise InvalidBankParams(f"n_scales must be >= 2, got {self.n_scales}")
        if dims == 2 and self.n_orientations < 3:
            raise InvalidBankParams(f"n_orientations must be >= 3, got {self.n_orientations}")
        if not self.min_wavelength >= 2.0:
            raise InvalidBankParams("min_wavelength must be >= 2 px (Nyquist)")
        if not self.scale_mult > 1.0:
            raise InvalidBankParams("scale_mult must exceed 1")
        if not 0.0 < self.sigma_ratio < 1.0:
            raise InvalidBankParams("sigma_ratio must lie in (0, 1)")


def _log_gabor(radius, wavelength, sigma_ratio):
    fo = 1.0 / wavelength
    with np.errstate(divide="ignore"):
        g = np.exp(-(np.log(radius / fo) ** 2) / (2.0 * math.log(sigma_ratio) ** 2))
    g[radius <= 0] = 0.0
    return g


def _noise_floor(smallest_amp, n_scales, mult, k=NOISE_K):
    """Rayleigh-model noise energy threshold from the median smallest-scale amplitude."""
    tau = np.median(smallest_amp) / math.sqrt(math.log(4.0))
    total_tau = tau * (1.0 - (1.0 / mult) ** n_scales) / (1.0 - 1.0 / mult)
    mean = total_tau * math.sqrt(math.pi / 2.0)
    sigma = total_tau * math.sqrt((4.0 - math.pi) / 2.0)
    return mean + k * sigma


def _congruency(responses, params: BankParams, noise_comp: bool):
    """Shared 1-D/2-D tail: responses is (n_scales, ...) complex."""
    amp = np.abs(responses)
    sum_amp = amp.sum(axis=0)
    energy = np.abs(responses.sum(axis=0))
    if noise_comp:
        t = _noise_floor(amp[0], params.n_scales, params.scale_mult)
        energy = np.maximum(energy - t, 0.0)
    eps = REL_EPS * float(sum_amp.mean()) + ABS_EPS
    spread = (sum_amp / (amp.max(axis=0) + eps) - 1.0) / (params.n_scales - 1)
    weight = 1.0 / (1.0 + np.exp(SPREAD_GAIN * (SPREAD_CUTOFF - spread)))
    return np.clip(weight * energy / (sum_amp + eps), 0.0, 1.0)


def pc_profile_1d(signal, params: BankParams | None = None, noise_comp: bool = False) -> np.ndarray:
    """Phase congruency of every sample of a 1-D signal.

    The signal is mirror-extended before filtering so the periodic FFT does not
    see a spurious jump between its last and first samples.
    """
    params = params or BankParams()
    params.validate(dims=1)
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size < 64:
        raise SignalTooShort(f"need a 1-D signal of >= 64 samples, got shape {x.shape}")
    n = x.size
    ext = np.concatenate([x, x[::-1]])
    ext = ext - ext.mean()
    spectrum = fft.fft(ext)
    freq = fft.fftfreq(ext.size)
    radius = np.where(freq > 0, freq, 0.0)  # one-sided: analytic responses
    responses = np.stack([
        fft.ifft(spectrum * _log_gabor(radius, params.min_wavelength * params.scale_mult ** s,
                                       params.sigma_ratio))
        for s in range(params.n_scales)
    ])
    return _congruency(responses, params, noise_comp)[:n]


# --------------------------------------------------------------------- 2-D

@dataclass(frozen=True)
class LogGaborBank:
    params: BankParams
    width: int
    height: int
    orientations: np.ndarray
    filters: np.ndarray  # (n_scales, n_orientations, height, width), unshifted FFT layout

    def filter(self, scale: int, orientation: int) -> np.ndarray:
        return self.filters[scale, orientation]

    def __len__(self):
        return self.filters.shape[0] * self.filters.shape[1]


def build_bank(params: BankParams | None, width: int, height: int) -> LogGaborBank:
    params = params or BankParams()
    params.validate(dims=2)
    if width < 32 or height < 32:
        raise InvalidBankParams(f"bank needs at least 32x32, got {width}x{height}")

    v = fft.fftfreq(height)[:, None]
    u = fft.fftfreq(width)[None, :]
    radius = np.sqrt(u * u + v * v)
    # -v so angles run anticlockwise in image coordinates
    theta = np.arctan2(-v, u)
    # Butterworth low-pass keeps the corners of the spectrum out
    lowpass = 1.0 / (1.0 + (radius / 0.45) ** 30)

    radial = np.stack([
        _log_gabor(radius, params.min_wavelength * params.scale_mult ** s, params.sigma_ratio) * lowpass
        for s in range(params.n_scales)
    ])
    no = params.n_orientations
    orientations = np.arange(no) * np.pi / no
    angular = []
    for angle in orientations:
        ds = np.sin(theta) * math.cos(angle) - np.cos(theta) * math.sin(angle)
        dc = np.cos(theta) * math.cos(angle) + np.sin(theta) * math.sin(angle)
        dtheta = np.minimum(np.abs(np.arctan2(ds, dc)) * no / 2.0, np.pi)
        angular.append((np.cos(dtheta) + 1.0) / 2.0)
    filters = radial[:, None] * np.stack(angular)[None]
    filters[:, :, 0, 0] = 0.0
    filters.setflags(write=False)
    return LogGaborBank(params, width, height, orientations, filters)


@dataclass(frozen=True)
class PCMaps:
    per_orientation: np.ndarray  # (n_orientations, H, W) in [0, 1]
    max_moment: np.ndarray
    min_moment: np.ndarray
    orientations: np.ndarray = field(repr=False)

    @property
    def shape(self):
        return self.max_moment.shape


def moment_maps(pc: np.ndarray, orientations: np.ndarray):
    """Max/min moments of the orientation-weighted PC covariance."""
    cos = np.cos(orientations)[:, None, None]
    sin = np.sin(orientations)[:, None, None]
    pcc, pcs = pc * cos, pc * sin
    a = np.sum(pcc * pcc, axis=0)
    b = 2.0 * np.sum(pcc * pcs, axis=0)
    c = np.sum(pcs * pcs, axis=0)
    root = np.sqrt(b * b + (a - c) ** 2)
    big = 0.5 * (c + a + root)
    small = np.maximum(0.5 * (c + a - root), 0.0)
    return big, np.minimum(small, big)


def compute_pc_maps(img: GrayImage, bank: LogGaborBank, noise_comp: bool = True) -> PCMaps:
    px = img.pixels if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    if px.shape != (bank.height, bank.width):
        raise DimensionMismatch(
            f"image is {px.shape[1]}x{px.shape[0]}, bank is {bank.width}x{bank.height}"
        )
    spectrum = fft.fft2(px - px.mean())
    pc = np.empty((len(bank.orientations),) + px.shape)
    for o in range(len(bank.orientations)):
        responses = fft.ifft2(spectrum[None] * bank.filters[:, o], axes=(-2, -1))
        pc[o] = _congruency(responses, bank.params, noise_comp)
    big, small = moment_maps(pc, bank.orientations)
    return PCMaps(pc, big, small, bank.orientations)


# --------------------------------------------------------------------- keypoints

@dataclass(frozen=True)
class Keypoint:
    x: int
    y: int
    strength: float
    kind: str = "corner"


def detect_keypoints(maps: PCMaps, nms_radius: int = 5, threshold: float | None = None,
                     max_count: int = 500, border: int = 16, kind: str = "corner"):
    """Strict local maxima of a moment map, strongest first.

    ``threshold=None`` uses mean + 1 std of the chosen map.  ``kind`` is
    ``"corner"`` (minimum moment), ``"edge"`` (maximum moment) or ``"both"``.
    """
    if nms_radius < 1:
        raise ValueError("nms_radius must be >= 1")
    if kind == "both":
        kps = (detect_keypoints(maps, nms_radius, threshold, max_count, border, "corner")
               + detect_keypoints(maps, nms_radius, threshold, max_count, border, "edge"))
        kps.sort(key=lambda k: (-k.strength, k.y, k.x, k.kind))
        return kps[:max_count]
    if kind == "corner":
        source = maps.min_moment
    elif kind == "edge":
        source = maps.max_moment
    else:
        raise ValueError(f"unknown keypoint kind {kind!r}")
    source = np.asarray(source, dtype=np.float64)
    if threshold is None:
        threshold = float(source.mean() + source.std())
    mask = kernels.nms_strict(source, int(nms_radius), float(threshold), int(border))
    ys, xs = np.nonzero(mask)
    vals = source[ys, xs]
    order = np.lexsort((xs, ys, -vals))[:max_count]
    return [Keypoint(int(xs[i]), int(ys[i]), float(vals[i]), kind) for i in order]


def detect(img: GrayImage, params: BankParams | None = None, noise_comp: bool = True,
           bank: LogGaborBank | None = None, **kw):
    """Convenience wrapper: bank -> PC maps -> keypoints.  Returns (keypoints, maps)."""
    if bank is None:
        bank = build_bank(params, img.width, img.height)
    maps = compute_pc_maps(img, bank, noise_comp)
    return detect_keypoints(maps, **kw), maps


def write_keypoints(path, keypoints) -> None:
    with open(os.fspath(path), "w") as fh:
        fh.write("# x y strength kind\n")
        for k in keypoints:
            fh.write(f"{k.x} {k.y} {k.strength:.9g} {k.kind}\n")


def read_keypoints(path):
    out = []
    with open(os.fspath(path)) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            x, y, s, kind = line.split()
            out.append(Keypoint(int(x), int(y), float(s), kind))
    return out

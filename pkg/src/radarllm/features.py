"""Five sequence features of an observation vector, and patch tokenization.

Features, in concatenation order:

* ``ip``  - instantaneous phase arg x(n)
* ``dse`` - per-bin Doppler spectrum entropy -F~ ln F~
* ``sms`` - time-averaged STFT magnitude in dB
* ``amp`` - amplitude |x(n)|
* ``dp``  - Doppler phase, arg of the DFT

Doppler-domain features use the N DFT bins f_d = k / (N T_s) ordered from
the most negative to the most positive frequency.  Since the kernel
exp(-j 2 pi f_d n T_s) reduces to exp(-j 2 pi k n / N) at those bins, the
PRF does not enter the computation.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ObservationVector
from .errors import DegenerateInputError, ValidationError

log = logging.getLogger(__name__)

FEATURE_NAMES = ("ip", "dse", "sms", "amp", "dp")
SMS_FLOOR = 1e-12


def _wrap_phase(phi: np.ndarray) -> np.ndarray:
    # np.angle can return exactly -pi (negative real, -0.0 imaginary); fold onto (-pi, pi]
    return np.where(phi <= -np.pi, phi + 2 * np.pi, phi)


def instantaneous_phase(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    if x.size == 0:
        raise ValidationError("instantaneous_phase needs a nonempty input")
    return _wrap_phase(np.angle(x))


def doppler_transform(x) -> np.ndarray:
    """Unnormalized DFT at the N Doppler bins, ordered from -1/(2T_s) upward."""
    x = np.asarray(x, dtype=np.complex128)
    if x.size == 0:
        raise ValidationError("doppler transform needs N >= 1")
    return np.fft.fftshift(np.fft.fft(x))


def doppler_bins(N: int, prf_hz: float = 1.0) -> np.ndarray:
    """Doppler frequencies (Hz) matching the ordering of :func:`doppler_transform`."""
    return np.fft.fftshift(np.fft.fftfreq(N, d=1.0 / prf_hz))


def doppler_amplitude_spectrum(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    return np.abs(doppler_transform(x)) / math.sqrt(x.size)


def doppler_spectrum_entropy(F) -> np.ndarray:
    """Per-bin entropy contribution -F~ ln F~ with F~ = F / sum(F) and 0 ln 0 = 0.

    The result is a sequence (one value per bin), not a scalar; its sum is
    the Shannon entropy of the normalized spectrum.
    """
    F = np.asarray(F, dtype=np.float64)
    if np.any(F < 0):
        raise ValidationError("spectrum must be nonnegative")
    total = F.sum()
    if not total > 0:
        raise DegenerateInputError("all-zero Doppler spectrum has no entropy")
    p = F / total
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = -p[pos] * np.log(p[pos])
    return out


def stft(x, window, hop: int, omega: int) -> np.ndarray:
    """Short-time Fourier transform, shape [omega, n_frames].

    Frame m covers samples m*hop .. m*hop+W-1 and the transform kernel uses
    the absolute sample index n, i.e. S(k, m) = sum_n x(n) w(n - m*hop)
    exp(-j 2 pi k n / omega).
    """
    x = np.asarray(x, dtype=np.complex128)
    w = np.asarray(window, dtype=np.float64)
    N, W = x.size, w.size
    if W < 1 or W > N:
        raise ValidationError(f"window length {W} must be in [1, N={N}]")
    if hop < 1:
        raise ValidationError("hop must be >= 1")
    if omega < W:
        raise ValidationError(f"omega={omega} must be >= window length {W}")
    n_frames = (N - W) // hop + 1
    starts = np.arange(n_frames) * hop
    frames = x[starts[:, None] + np.arange(W)[None, :]] * w[None, :]
    spec = np.fft.fft(frames, n=omega, axis=1)
    k = np.arange(omega)
    shift = np.exp(-2j * np.pi * np.outer(starts, k) / omega)
    return (spec * shift).T


def sms(S) -> np.ndarray:
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[1] < 1:
        raise ValidationError("sms needs a [omega, n_frames] matrix with at least one frame")
    return 10.0 * np.log10(np.maximum(np.abs(S).sum(axis=1), SMS_FLOOR))


def amplitude(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    if x.size == 0:
        raise ValidationError("amplitude needs a nonempty input")
    return np.abs(x)


def doppler_phase(x) -> np.ndarray:
    return _wrap_phase(np.angle(doppler_transform(x)))


def make_window(name: str, W: int) -> np.ndarray:
    if name == "hamming":
        return np.hamming(W)
    if name == "hann":
        return np.hanning(W)
    if name in ("rect", "rectangular", "boxcar"):
        return np.ones(W)
    raise ValidationError(f"unknown window {name!r}")


@dataclass(frozen=True)
class FeatureConfig:
    window: str = "hamming"
    window_length: int = 64
    hop: int = 16
    omega: int | None = None  # None -> N, so all five features share one length


@dataclass
class FeatureSet:
    ip: np.ndarray
    dse: np.ndarray
    sms: np.ndarray
    amp: np.ndarray
    dp: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.ip, self.dse, self.sms, self.amp, self.dp])

    def concat(self) -> np.ndarray:
        return np.concatenate([self.ip, self.dse, self.sms, self.amp, self.dp])


def extract_all(v: ObservationVector | np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> FeatureSet:
    x = np.asarray(v.values if isinstance(v, ObservationVector) else v, dtype=np.complex128)
    N = x.size
    omega = cfg.omega or N
    spectrum = doppler_amplitude_spectrum(x)
    try:
        dse = doppler_spectrum_entropy(spectrum)
    except DegenerateInputError:
        log.warning("all-zero Doppler spectrum; DSE replaced by zeros")
        dse = np.zeros(N)
    S = stft(x, make_window(cfg.window, cfg.window_length), cfg.hop, omega)
    return FeatureSet(
        ip=instantaneous_phase(x),
        dse=dse,
        sms=sms(S),
        amp=amplitude(x),
        dp=doppler_phase(x),
    )


def extract_batch(vectors: Sequence[ObservationVector], cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Feature array of shape [B, 5, N]."""
    return np.stack([extract_all(v, cfg).stack() for v in vectors])


# -- normalization --------------------------------------------------------------


@dataclass
class FeatureNormalizer:
    """Per-feature z-score statistics, fitted on the training split only."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(5))
    std: np.ndarray = field(default_factory=lambda: np.ones(5))

    @classmethod
    def fit(cls, features: np.ndarray) -> "FeatureNormalizer":
        mean = features.mean(axis=(0, 2))
        std = features.std(axis=(0, 2))
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean[None, :, None]) / self.std[None, :, None]


# -- patching -------------------------------------------------------------------


def n_patches(N: int, L: int) -> int:
    return -(-N // L)


def n_tokens(N: int, L: int) -> int:
    return len(FEATURE_NAMES) * n_patches(N, L)


@dataclass
class FeatureTokenBatch:
    tokens: np.ndarray  # [B, K, L]
    labels: np.ndarray  # [B], 0 = target, 1 = clutter
    sample_ids: np.ndarray  # [B]
    token_feature_origin: list[tuple[str, int]]
    N: int

    @property
    def K(self) -> int:
        return self.tokens.shape[1]

    @property
    def L(self) -> int:
        return self.tokens.shape[2]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def subset(self, idx) -> "FeatureTokenBatch":
        idx = np.asarray(idx)
        return FeatureTokenBatch(
            self.tokens[idx], self.labels[idx], self.sample_ids[idx], self.token_feature_origin, self.N
        )


def patch(features: np.ndarray, L: int, labels=None, sample_ids=None) -> FeatureTokenBatch:
    """Split each of the five length-N channels into ceil(N/L) patches of length L.

    The last patch of every channel is zero-padded.  Patches are laid out
    channel by channel, so token k comes from feature ``k // P`` and patch
    ``k % P`` with P = ceil(N/L).
    """
    if L < 1:
        raise ValidationError("patch length L must be >= 1")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 2:
        features = features[None]
    B, C, N = features.shape
    P = n_patches(N, L)
    padded = np.zeros((B, C, P * L))
    padded[:, :, :N] = features
    tokens = padded.reshape(B, C * P, L)
    names = FEATURE_NAMES if C == len(FEATURE_NAMES) else tuple(f"f{c}" for c in range(C))
    origin = [(names[c], p) for c in range(C) for p in range(P)]
    if labels is None:
        labels = np.zeros(B, dtype=np.int64)
    if sample_ids is None:
        sample_ids = np.arange(B, dtype=np.int64)
    return FeatureTokenBatch(tokens, np.asarray(labels, dtype=np.int64), np.asarray(sample_ids, dtype=np.int64), origin, N)


def unpatch(batch: FeatureTokenBatch, n_features: int = len(FEATURE_NAMES)) -> np.ndarray:
    B, K, L = batch.tokens.shape
    P = K // n_features
    return batch.tokens.reshape(B, n_features, P * L)[:, :, : batch.N]


def write_feature_dump(path: str | Path, sample_ids: Sequence[int], features: np.ndarray) -> None:
    """Long-format CSV: sample_id, feature_name, bin_index, value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "feature_name", "bin_index", "value"])
        for sid, feats in zip(sample_ids, features):
            for name, row in zip(FEATURE_NAMES, feats):
                for i, value in enumerate(row):
                    w.writerow([int(sid), name, i, repr(float(value))])

"""EEG epoch augmentations (two families) and the log-magnitude STFT view.

All augmentations take either an :class:`EegEpoch` or a numpy array whose
last axis is time. Arrays with leading axes are treated as a batch of
independent epochs: every row gets its own random draws. The output type
matches the input type.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

EPOCH_SECONDS = 30
DEFAULT_RATE_HZ = 100
N_FFT = 256
HOP = 64


class InvalidInputError(ValueError):
    pass


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EegEpoch:
    """One single-channel EEG segment; ``label`` is a SleepStage value or None."""

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_RATE_HZ
    label: Optional[int] = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError(f"epoch samples must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("epoch contains NaN or Inf samples")
        if self.sample_rate_hz <= 0:
            raise InvalidInputError("sample_rate_hz must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def is_canonical(self) -> bool:
        return len(self) == EPOCH_SECONDS * self.sample_rate_hz


@dataclass(frozen=True)
class Spectrogram:
    magnitudes: np.ndarray  # [frames, bins]
    n_fft: int = N_FFT
    hop: int = HOP

    @property
    def shape(self):
        return self.magnitudes.shape


@dataclass
class AugmentationConfig:
    jitter_ratio: float = 0.1
    mask_segments: int = 5
    mask_max_fraction: float = 0.2
    mask_min_length: int = 1
    flip_probability: float = 0.5
    flip_invert_sign: bool = False
    scale_sigma: float = 0.5
    seed: int = 0

    def validate(self, length: int = EPOCH_SECONDS * DEFAULT_RATE_HZ) -> None:
        if not 0.0 < self.jitter_ratio < 1.0:
            raise InvalidConfigError(f"jitter_ratio must lie in (0, 1), got {self.jitter_ratio}")
        if not 0.0 < self.mask_max_fraction < 1.0:
            raise InvalidConfigError(f"mask_max_fraction must lie in (0, 1), got {self.mask_max_fraction}")
        if self.mask_segments < 0:
            raise InvalidConfigError("mask_segments must be >= 0")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise InvalidConfigError(f"flip_probability must lie in [0, 1], got {self.flip_probability}")
        if self.scale_sigma <= 0:
            raise InvalidConfigError("scale_sigma must be > 0")
        if self.mask_segments:
            _mask_run_bounds(length, self.mask_segments, self.mask_max_fraction, self.mask_min_length)


Signal = Union[EegEpoch, np.ndarray]


def _unwrap(x: Signal) -> np.ndarray:
    if isinstance(x, EegEpoch):
        return x.samples
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise InvalidInputError("signal must have at least one axis")
    return arr


def _rewrap(like: Signal, out: np.ndarray) -> Signal:
    if isinstance(like, EegEpoch):
        return replace(like, samples=out)
    return out


def _check_nonempty(x: np.ndarray) -> None:
    if x.shape[-1] == 0:
        raise InvalidInputError("zero-length epoch")


def jitter(epoch: Signal, ratio: float, rng: np.random.Generator) -> Signal:
    """Add uniform noise bounded by ``ratio`` times each epoch's peak-to-peak range."""
    if not 0.0 < ratio < 1.0:
        raise InvalidConfigError(f"jitter ratio must lie in (0, 1), got {ratio}")
    x = _unwrap(epoch)
    _check_nonempty(x)
    p2p = np.ptp(x, axis=-1, keepdims=True)
    bound = ratio * p2p
    noise = rng.uniform(-1.0, 1.0, size=x.shape) * bound
    return _rewrap(epoch, x + noise)


def _mask_run_bounds(length: int, segments: int, max_fraction: float, min_length: int) -> tuple[int, int]:
    max_len = int(np.floor(max_fraction * length / segments))
    if segments * min_length > length or max_len < min_length:
        raise InvalidConfigError(
            f"cannot place {segments} runs of length >= {min_length} within "
            f"{max_fraction:.3g} of {length} samples"
        )
    return min_length, max_len


def _draw_runs(rng, length, segments, lo, hi, max_tries=1000):
    runs = []
    for _ in range(segments):
        for _ in range(max_tries):
            n = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(0, length - n + 1))
            # keep a one-sample gap so runs stay distinct
            if all(start > e or start + n < s for s, e in runs):
                runs.append((start, start + n))
                break
        else:
            raise InvalidConfigError("mask placement failed; too many or too long segments")
    return runs


def mask(epoch: Signal, segments: int, max_fraction: float, rng: np.random.Generator,
         min_length: int = 1) -> Signal:
    """Zero ``segments`` non-overlapping runs, total length at most ``max_fraction`` of the epoch.

    Each run length is uniform in ``[min_length, floor(max_fraction * L / segments)]``;
    positions are drawn uniformly and rejected on overlap.
    """
    if not 0.0 < max_fraction < 1.0:
        raise InvalidConfigError(f"max_fraction must lie in (0, 1), got {max_fraction}")
    x = _unwrap(epoch)
    _check_nonempty(x)
    if segments == 0:
        return _rewrap(epoch, x.copy())
    length = x.shape[-1]
    lo, hi = _mask_run_bounds(length, segments, max_fraction, min_length)
    out = x.copy()
    rows = out.reshape(-1, length)
    for row in rows:
        for s, e in _draw_runs(rng, length, segments, lo, hi):
            row[s:e] = 0.0
    return _rewrap(epoch, out)


def flip(epoch: Signal, probability: float, rng: np.random.Generator,
         invert_sign: bool = False) -> Signal:
    """Time-reverse each epoch with the given probability (optionally also negate it)."""
    if not 0.0 <= probability <= 1.0:
        raise InvalidConfigError(f"flip probability must lie in [0, 1], got {probability}")
    x = _unwrap(epoch)
    _check_nonempty(x)
    hit = rng.random(size=x.shape[:-1] + (1,)) < probability
    flipped = x[..., ::-1]
    if invert_sign:
        flipped = -flipped
    return _rewrap(epoch, np.where(hit, flipped, x))


def scale(epoch: Signal, sigma: float, rng: np.random.Generator,
          clip: tuple[float, float] = (0.1, 2.0)) -> Signal:
    """Multiply each epoch by one scalar drawn from N(1, sigma^2), clipped to ``clip``."""
    if sigma <= 0:
        raise InvalidConfigError(f"scale sigma must be > 0, got {sigma}")
    x = _unwrap(epoch)
    _check_nonempty(x)
    s = np.clip(rng.normal(1.0, sigma, size=x.shape[:-1] + (1,)), *clip)
    return _rewrap(epoch, x * s)


def augment_t1(epoch: Signal, cfg: AugmentationConfig, rng: np.random.Generator) -> Signal:
    """First family: jitter, then mask."""
    out = jitter(epoch, cfg.jitter_ratio, rng)
    return mask(out, cfg.mask_segments, cfg.mask_max_fraction, rng, min_length=cfg.mask_min_length)


def augment_t2(epoch: Signal, cfg: AugmentationConfig, rng: np.random.Generator) -> Signal:
    """Second family: flip, then scale."""
    out = flip(epoch, cfg.flip_probability, rng, invert_sign=cfg.flip_invert_sign)
    return scale(out, cfg.scale_sigma, rng)


def hann_window(n: int) -> np.ndarray:
    # periodic Hann, the usual choice for spectral analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames(length: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    return (length - n_fft) // hop + 1


def log_stft(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """``log(1 + |STFT|)`` over the last axis; returns ``[..., frames, n_fft // 2 + 1]``."""
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[-1]
    if length < n_fft:
        raise InvalidInputError(f"signal length {length} shorter than n_fft={n_fft}")
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft, axis=-1)[..., ::hop, :]
    spec = np.fft.rfft(frames * hann_window(n_fft), axis=-1)
    return np.log1p(np.abs(spec))


def stft_spectrogram(epoch: Signal, n_fft: int = N_FFT, hop: int = HOP) -> Spectrogram:
    x = _unwrap(epoch)
    if x.ndim != 1:
        raise InvalidInputError("stft_spectrogram takes one epoch; use log_stft for batches")
    return Spectrogram(magnitudes=log_stft(x, n_fft, hop), n_fft=n_fft, hop=hop)

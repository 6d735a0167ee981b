"""Sleep-EEG records: EDF ingestion, resampling, epoching, subject splits,
a synthetic stage-conditioned generator, and the on-disk cache.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from enum import IntEnum
from math import gcd
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.signal import resample_poly

from .seeding import rng_for
from .transforms import DEFAULT_RATE_HZ, EPOCH_SECONDS, EegEpoch, InvalidConfigError

log = logging.getLogger(__name__)


class SleepStage(IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


N_STAGES = len(SleepStage)

# R&K stage 4 is merged into N3 (AASM); '?' and movement epochs are dropped.
ANNOTATION_STAGES = {
    "sleep stage w": SleepStage.W,
    "sleep stage 1": SleepStage.N1,
    "sleep stage 2": SleepStage.N2,
    "sleep stage 3": SleepStage.N3,
    "sleep stage 4": SleepStage.N3,
    "sleep stage r": SleepStage.REM,
    "w": SleepStage.W,
    "n1": SleepStage.N1,
    "n2": SleepStage.N2,
    "n3": SleepStage.N3,
    "rem": SleepStage.REM,
    "r": SleepStage.REM,
}


class LeakageError(RuntimeError):
    """A subject appears in more than one split group."""


class CacheFormatError(ValueError):
    pass


class MissingChannelError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass
class RawRecording:
    """Continuous single-channel signal plus (onset_s, duration_s, stage) annotations."""

    subject_id: str
    signal: np.ndarray
    sample_rate_hz: int
    annotations: list[tuple[float, float, Optional[int]]] = field(default_factory=list)
    source: str = "EDF"


@dataclass
class SubjectRecord:
    subject_id: str
    epochs: np.ndarray  # float32 [n_epochs, epoch_len]
    labels: Optional[np.ndarray] = None  # int64 [n_epochs]
    source: str = "SYNTH"
    sample_rate_hz: int = DEFAULT_RATE_HZ

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.float32)
        if self.epochs.ndim != 2:
            self.epochs = self.epochs.reshape(-1, EPOCH_SECONDS * self.sample_rate_hz)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.epochs.shape[0],):
                raise ValueError(f"{self.subject_id}: {self.labels.shape[0]} labels "
                                 f"for {self.epochs.shape[0]} epochs")

    def __len__(self):
        return self.epochs.shape[0]

    def epoch(self, i: int) -> EegEpoch:
        label = None if self.labels is None else int(self.labels[i])
        return EegEpoch(self.epochs[i].astype(np.float64), self.sample_rate_hz, label)


@dataclass
class DatasetSplit:
    pretext: list[str]
    train: list[str]
    test: list[str]
    seed: int = 0

    def __post_init__(self):
        assert_disjoint(pretext=self.pretext, train=self.train, test=self.test)

    def to_json(self) -> str:
        return json.dumps({"pretext": self.pretext, "train": self.train, "test": self.test,
                           "seed": self.seed}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        d = json.loads(text)
        return cls(list(d.get("pretext", [])), list(d.get("train", [])), list(d.get("test", [])),
                   int(d.get("seed", 0)))


def assert_disjoint(**groups: Iterable[str]) -> None:
    """Raise :class:`LeakageError` if any subject id occurs in two named groups."""
    seen: dict[str, str] = {}
    for name, ids in groups.items():
        for sid in ids:
            if sid in seen and seen[sid] != name:
                raise LeakageError(f"subject {sid!r} is in both {seen[sid]!r} and {name!r}")
            seen[sid] = name


# --- EDF -----------------------------------------------------------------

def _stage_from_annotation(text: str) -> Optional[int]:
    stage = ANNOTATION_STAGES.get(text.strip().lower())
    return None if stage is None else int(stage)


def _read_annotations(path: Path) -> list[tuple[float, float, Optional[int]]]:
    import pyedflib

    with pyedflib.EdfReader(str(path)) as f:
        onsets, durations, texts = f.readAnnotations()
    return [(float(o), float(d), _stage_from_annotation(t)) for o, d, t in zip(onsets, durations, texts)]


def ingest_edf(path, channel: str, hypnogram: Optional[os.PathLike] = None,
               subject_id: Optional[str] = None) -> RawRecording:
    """Read one channel (at its native rate) and any sleep-stage annotations.

    Annotations come from ``hypnogram`` when given (SleepEDF ships them as a
    separate EDF+ file), otherwise from the signal file's own annotation track.
    """
    import pyedflib

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"EDF file not found: {path}")
    try:
        reader = pyedflib.EdfReader(str(path))
    except OSError as exc:
        raise OSError(f"cannot read EDF file {path}: {exc}") from exc
    with reader as f:
        names = f.getSignalLabels()
        wanted = channel.strip().lower()
        matches = [i for i, n in enumerate(names) if n.strip().lower() in (wanted, f"eeg {wanted}")]
        if not matches:
            raise MissingChannelError(f"channel {channel!r} not in {path.name}; available: {', '.join(names)}")
        idx = matches[0]
        signal = f.readSignal(idx)
        rate = f.getSampleFrequency(idx)
        onsets, durations, texts = f.readAnnotations()
    annotations = [(float(o), float(d), _stage_from_annotation(t))
                   for o, d, t in zip(onsets, durations, texts)]
    if hypnogram is not None:
        annotations = _read_annotations(Path(hypnogram))
    if abs(rate - round(rate)) > 1e-6:
        raise ValueError(f"non-integer sample rate {rate} in {path}")
    return RawRecording(subject_id or path.stem, np.asarray(signal, dtype=np.float64), int(round(rate)),
                        annotations, source="EDF")


def write_edf(path, signal: np.ndarray, sample_rate_hz: int, channel: str = "Fpz-Cz",
              annotations: Sequence[tuple[float, float, str]] = (), physical_range: float | None = None) -> None:
    """Write a single-channel 16-bit EDF+ file (used for fixtures and exports)."""
    import pyedflib

    signal = np.asarray(signal, dtype=np.float64)
    pmax = physical_range or float(np.max(np.abs(signal))) or 1.0
    # header fields hold 8 characters; round up to 5 significant digits
    step = 10.0 ** (np.floor(np.log10(pmax)) - 4)
    pmax = float(f"{np.ceil(pmax / step) * step:.5g}")
    with pyedflib.EdfWriter(str(path), 1, file_type=pyedflib.FILETYPE_EDFPLUS) as w:
        w.setSignalHeaders([{
            "label": channel, "dimension": "uV", "sample_frequency": sample_rate_hz,
            "physical_max": pmax, "physical_min": -pmax,
            "digital_max": 32767, "digital_min": -32768, "transducer": "", "prefilter": "",
        }])
        w.writeSamples([signal])
        for onset, duration, text in annotations:
            w.writeAnnotation(onset, duration, text)


def resample(signal: np.ndarray, from_hz: int, to_hz: int) -> np.ndarray:
    """Polyphase resampling; output length is ``round(len * to_hz / from_hz)``."""
    if from_hz <= 0 or to_hz <= 0:
        raise ValueError("sample rates must be positive")
    signal = np.asarray(signal, dtype=np.float64)
    if from_hz == to_hz:
        return signal.copy()
    g = gcd(int(from_hz), int(to_hz))
    out = resample_poly(signal, int(to_hz) // g, int(from_hz) // g)
    return out[: int(round(len(signal) * to_hz / from_hz))]


def segment_epochs(raw: RawRecording, epoch_seconds: int = EPOCH_SECONDS) -> SubjectRecord:
    """Cut non-overlapping epochs, dropping the trailing partial one.

    With annotations present, each epoch takes the stage covering its start;
    epochs without a valid stage (unscored, '?', movement) are dropped.
    """
    n = epoch_seconds * raw.sample_rate_hz
    n_epochs = len(raw.signal) // n
    epochs = np.asarray(raw.signal[: n_epochs * n], dtype=np.float64).reshape(n_epochs, n)
    if not raw.annotations:
        return SubjectRecord(raw.subject_id, epochs, None, raw.source, raw.sample_rate_hz)
    labels = np.full(n_epochs, -1, dtype=np.int64)
    for onset, duration, stage in raw.annotations:
        if stage is None:
            continue
        first = int(np.ceil(onset / epoch_seconds - 1e-9))
        last = int(np.floor((onset + duration) / epoch_seconds + 1e-9))
        labels[max(first, 0): min(last, n_epochs)] = stage
    keep = labels >= 0
    return SubjectRecord(raw.subject_id, epochs[keep], labels[keep], raw.source, raw.sample_rate_hz)


def load_edf_subject(path, channel: str, hypnogram=None, target_hz: int = DEFAULT_RATE_HZ,
                     subject_id: Optional[str] = None) -> SubjectRecord:
    """ingest -> resample to ``target_hz`` -> 30 s epochs."""
    raw = ingest_edf(path, channel, hypnogram, subject_id)
    if raw.sample_rate_hz != target_hz:
        raw = RawRecording(raw.subject_id, resample(raw.signal, raw.sample_rate_hz, target_hz), target_hz,
                           raw.annotations, raw.source)
    return segment_epochs(raw)


# --- splits ---------------------------------------------------------------

def split_subjects(subjects: Sequence[str], counts: tuple[int, int, int], seed: int = 0) -> DatasetSplit:
    p, tr, te = (int(c) for c in counts)
    if min(p, tr, te) < 0:
        raise InvalidConfigError("split counts must be non-negative")
    subjects = list(subjects)
    if len(set(subjects)) != len(subjects):
        raise InvalidConfigError("duplicate subject ids")
    if p + tr + te > len(subjects):
        raise InvalidConfigError(f"requested {p}+{tr}+{te} subjects but only {len(subjects)} available")
    order = rng_for(seed, "split").permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    return DatasetSplit(shuffled[:p], shuffled[p:p + tr], shuffled[p + tr:p + tr + te], seed)


# --- synthetic data -------------------------------------------------------

# Rows: from-stage, columns: to-stage, order W, N1, N2, N3, REM.
TRANSITION_MATRIX = np.array([
    [0.86, 0.10, 0.02, 0.00, 0.02],
    [0.08, 0.52, 0.30, 0.00, 0.10],
    [0.02, 0.04, 0.84, 0.07, 0.03],
    [0.01, 0.00, 0.14, 0.85, 0.00],
    [0.04, 0.06, 0.06, 0.00, 0.84],
])


def stationary_distribution(p: np.ndarray = TRANSITION_MATRIX) -> np.ndarray:
    w, v = np.linalg.eig(p.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return pi / pi.sum()


# Band-limited components per stage: (low Hz, high Hz, rms uV)
_STAGE_BANDS = {
    SleepStage.W: [(8.0, 12.0, 14.0), (15.0, 30.0, 7.0), (4.0, 7.0, 6.0), (0.5, 4.0, 8.0)],
    SleepStage.N1: [(4.0, 7.0, 12.0), (8.0, 12.0, 6.0), (0.5, 4.0, 10.0), (15.0, 30.0, 4.0)],
    SleepStage.N2: [(4.0, 7.0, 12.0), (0.5, 4.0, 16.0), (8.0, 12.0, 4.0)],
    SleepStage.N3: [(0.5, 4.0, 40.0), (4.0, 7.0, 7.0)],
    SleepStage.REM: [(4.0, 7.0, 10.0), (15.0, 30.0, 6.0), (8.0, 12.0, 5.0), (0.5, 4.0, 8.0)],
}
_PINK_RMS = 6.0
_SPINDLE_BAND = (12.0, 14.0)
_SPINDLE_AMP = 14.0
# per-epoch log-normal spread of each component's amplitude, truncated at 2 sigma
_COMPONENT_SPREAD = 0.35
_SUBJECT_GAIN_SPREAD = 0.3
# largest share of an epoch drawn from a neighbouring stage's profile;
# slow-wave sleep is scored on >20% delta activity, so it blends less
_MAX_BLEND = {SleepStage.W: 0.5, SleepStage.N1: 0.5, SleepStage.N2: 0.5, SleepStage.N3: 0.25,
              SleepStage.REM: 0.5}


def _band_noise(rng, n, rate, lo, hi, rms):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / rate)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    return x * (rms / (np.std(x) + 1e-12))


def _pink_noise(rng, n, rate, rms):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / rate)
    f[0] = f[1]
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x * (rms / np.std(x))


def _spindles(rng, n, rate, alpha_shift, weight):
    t = np.arange(n) / rate
    out = np.zeros(n)
    for _ in range(int(rng.integers(0, 4))):
        dur = rng.uniform(0.5, 1.5)
        centre = rng.uniform(dur, n / rate - dur)
        freq = rng.uniform(*_SPINDLE_BAND) + 0.25 * alpha_shift
        env = np.exp(-0.5 * ((t - centre) / (dur / 4)) ** 2)
        out += weight * _SPINDLE_AMP * env * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return out


def synth_epoch(stage: int, rng: np.random.Generator, rate: int = DEFAULT_RATE_HZ,
                gain: float = 1.0, alpha_shift: float = 0.0,
                blend_stage: Optional[int] = None, blend: float = 0.0) -> np.ndarray:
    """One 30 s epoch: the stage's band profile plus pink background noise.

    ``blend`` in [0, 1) mixes in the power profile of ``blend_stage``
    (transitional epochs look partly like their neighbours).
    """
    n = EPOCH_SECONDS * rate
    x = _pink_noise(rng, n, rate, _PINK_RMS)
    mix = [(int(stage), 1.0 - blend)]
    if blend_stage is not None and blend > 0:
        mix.append((int(blend_stage), blend))
    for st, w in mix:
        amp = np.sqrt(w)
        for lo, hi, rms in _STAGE_BANDS[SleepStage(st)]:
            if lo >= 8.0 and hi <= 12.0:
                lo, hi = lo + alpha_shift, hi + alpha_shift
            spread = np.clip(rng.normal(0.0, _COMPONENT_SPREAD), -2 * _COMPONENT_SPREAD, 2 * _COMPONENT_SPREAD)
            x += _band_noise(rng, n, rate, lo, hi, amp * rms * np.exp(spread))
        if st == SleepStage.N2:
            x += _spindles(rng, n, rate, alpha_shift, amp)
    return gain * x


def markov_stages(n: int, rng: np.random.Generator, p: np.ndarray = TRANSITION_MATRIX) -> np.ndarray:
    cum = np.cumsum(p, axis=1)
    stages = np.empty(n, dtype=np.int64)
    state = int(rng.choice(len(p), p=stationary_distribution(p)))
    for i in range(n):
        stages[i] = state
        state = min(int(np.searchsorted(cum[state], rng.random(), side="right")), len(p) - 1)
    return stages


def _blend_partner(stages: np.ndarray, i: int, rng) -> Optional[int]:
    """A neighbouring epoch's stage when it differs, else a chain-plausible one."""
    neighbours = [stages[j] for j in (i - 1, i + 1) if 0 <= j < len(stages) and stages[j] != stages[i]]
    if neighbours:
        return int(neighbours[int(rng.integers(len(neighbours)))])
    row = TRANSITION_MATRIX[stages[i]].copy()
    row[stages[i]] = 0.0
    return int(rng.choice(len(row), p=row / row.sum()))


def synth_generate(n_subjects: int, epochs_per_subject: int, seed: int = 0,
                   rate: int = DEFAULT_RATE_HZ) -> list[SubjectRecord]:
    """Deterministic labelled subjects with Markov stage sequences.

    Subjects differ in overall gain and alpha peak frequency, so that
    subject-level splits are harder than epoch-level ones.
    """
    records = []
    for s in range(n_subjects):
        rng = rng_for(seed, "synth", s)
        gain = rng.lognormal(0.0, _SUBJECT_GAIN_SPREAD)
        alpha_shift = rng.uniform(-1.0, 1.0)
        stages = markov_stages(epochs_per_subject, rng)
        epochs = np.zeros((epochs_per_subject, EPOCH_SECONDS * rate))
        for i, st in enumerate(stages):
            partner = _blend_partner(stages, i, rng)
            epochs[i] = synth_epoch(st, rng, rate, gain, alpha_shift, partner,
                                    rng.uniform(0.0, _MAX_BLEND[SleepStage(st)]))
        records.append(SubjectRecord(f"synth{s:03d}", epochs, stages, "SYNTH", rate))
    return records


# --- cache ----------------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cache_write(records: Iterable[SubjectRecord], directory) -> list[Path]:
    """One ``<id>.f32`` (little-endian float32, epochs concatenated) plus ``<id>.json`` per subject."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        sidecar = {
            "subject_id": rec.subject_id,
            "n_epochs": int(len(rec)),
            "epoch_length": int(rec.epochs.shape[1]),
            "sample_rate_hz": int(rec.sample_rate_hz),
            "labels": None if rec.labels is None else [int(v) for v in rec.labels],
            "source": rec.source,
        }
        data_path = directory / f"{rec.subject_id}.f32"
        _atomic_write(data_path, rec.epochs.astype("<f4").tobytes())
        _atomic_write(directory / f"{rec.subject_id}.json", json.dumps(sidecar, indent=1).encode())
        written.append(data_path)
    return written


def _read_one(sidecar_path: Path) -> SubjectRecord:
    try:
        meta = json.loads(sidecar_path.read_text())
        sid = str(meta["subject_id"])
        n_epochs = int(meta["n_epochs"])
        rate = int(meta["sample_rate_hz"])
        length = int(meta.get("epoch_length", EPOCH_SECONDS * rate))
        labels = meta.get("labels")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CacheFormatError(f"corrupted cache sidecar {sidecar_path}: {exc}") from exc
    raw = np.fromfile(sidecar_path.with_suffix(".f32"), dtype="<f4")
    if raw.size != n_epochs * length:
        raise CacheFormatError(f"{sidecar_path.with_suffix('.f32')}: expected {n_epochs * length} "
                               f"samples, found {raw.size}")
    if labels is not None and len(labels) != n_epochs:
        raise CacheFormatError(f"{sidecar_path}: {len(labels)} labels for {n_epochs} epochs")
    return SubjectRecord(sid, raw.reshape(n_epochs, length).astype(np.float32), labels,
                         meta.get("source", "SYNTH"), rate)


def cache_subjects(directory) -> list[str]:
    # keyed on data files so other JSON (provenance) can live alongside
    return sorted(p.stem for p in Path(directory).glob("*.f32"))


def cache_read(directory, subjects: Optional[Sequence[str]] = None) -> list[SubjectRecord]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"cache directory not found: {directory}")
    ids = cache_subjects(directory) if subjects is None else list(subjects)
    records = []
    for sid in ids:
        path = directory / f"{sid}.json"
        if not path.exists():
            raise FileNotFoundError(f"subject {sid!r} not in cache {directory}")
        records.append(_read_one(path))
    return records


# --- pooled epochs --------------------------------------------------------

class EpochPool:
    """Epochs of several subjects stacked together.

    Label reads are counted so pretraining can prove it never looked at them.
    """

    def __init__(self, records: Sequence[SubjectRecord]):
        records = list(records)
        if records:
            self.signals = np.concatenate([r.epochs for r in records]).astype(np.float32)
        else:
            self.signals = np.zeros((0, EPOCH_SECONDS * DEFAULT_RATE_HZ), dtype=np.float32)
        self.subject_ids = [r.subject_id for r in records]
        self.epoch_subject = np.concatenate(
            [np.full(len(r), i) for i, r in enumerate(records)]) if records else np.zeros(0, int)
        if records and all(r.labels is not None for r in records):
            self._labels = np.concatenate([r.labels for r in records])
        else:
            self._labels = None
        self.label_reads = 0

    def __len__(self):
        return self.signals.shape[0]

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    @property
    def labels(self) -> np.ndarray:
        self.label_reads += 1
        if self._labels is None:
            raise ValueError(f"no labels available for subjects {self.subject_ids}")
        return self._labels

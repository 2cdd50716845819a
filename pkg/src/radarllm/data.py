"""Radar echo synthesis, ingestion, segmentation and dataset files.

Echo sequences are complex baseband returns from one range cell.  They are
cut into overlapping observation vectors, split chronologically into
train / validation / test sets, and persisted in a small little-endian
binary container (``RLLM`` files).
"""

from __future__ import annotations

import csv
import enum
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyInputError,
    FormatError,
    TruncatedFileError,
    ValidationError,
    VersionError,
)

MAGIC = b"RLLM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIId")
_RECORD = struct.Struct("<QBI")


class Label(enum.IntEnum):
    """Class index convention: 0 = target present (H1), 1 = clutter only (H0)."""

    TARGET = 0
    CLUTTER = 1


class Source(enum.Enum):
    SYNTHETIC = "synthetic"
    INGESTED = "ingested"


@dataclass
class EchoSeries:
    """Echo returns from a single range cell, sampled once per pulse."""

    samples: np.ndarray
    prf_hz: float
    cell_kind: Label
    cell_id: int = 0
    source: Source = Source.SYNTHETIC

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        self.cell_kind = Label(self.cell_kind)
        if self.samples.ndim != 1:
            raise ValidationError("echo samples must be one-dimensional")
        if not (self.prf_hz > 0 and math.isfinite(self.prf_hz)):
            raise ValidationError(f"prf_hz must be positive and finite, got {self.prf_hz}")

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, EchoSeries):
            return NotImplemented
        return (
            self.prf_hz == other.prf_hz
            and self.cell_kind == other.cell_kind
            and self.cell_id == other.cell_id
            and np.array_equal(self.samples, other.samples)
        )


@dataclass
class ObservationVector:
    values: np.ndarray
    label: Label
    sample_id: int
    time_index: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        self.label = Label(self.label)

    def __eq__(self, other):
        if not isinstance(other, ObservationVector):
            return NotImplemented
        return (
            self.label == other.label
            and self.sample_id == other.sample_id
            and self.time_index == other.time_index
            and self.values.shape == other.values.shape
            and np.array_equal(self.values.view(np.uint64), other.values.view(np.uint64))
        )


@dataclass
class Dataset:
    """A collection of equal-length observation vectors sharing one PRF."""

    vectors: list[ObservationVector]
    prf_hz: float
    N: int = field(default=0)

    def __post_init__(self):
        if self.vectors:
            lengths = {len(v.values) for v in self.vectors}
            if len(lengths) != 1:
                raise ValidationError(f"vectors have mixed lengths {sorted(lengths)}")
            n = lengths.pop()
            if self.N and self.N != n:
                raise ValidationError(f"declared N={self.N} but vectors have length {n}")
            self.N = n
        ids = [v.sample_id for v in self.vectors]
        if len(set(ids)) != len(ids):
            raise ValidationError("sample_id values must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.vectors)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.N == other.N and self.prf_hz == other.prf_hz and self.vectors == other.vectors

    def by_label(self, label: Label) -> list[ObservationVector]:
        return [v for v in self.vectors if v.label == label]


@dataclass
class SceneParams:
    """Parameters of a synthetic sea-clutter scene.

    Clutter follows the compound-Gaussian (K-distribution) model: a Gamma
    texture of shape ``clutter_shape_nu`` and mean ``clutter_power`` that is
    held for ``texture_coherence`` pulses, multiplying unit-power circular
    Gaussian speckle.  ``speckle_bandwidth_hz`` > 0 colours the speckle with
    a Gaussian Doppler spectrum centred on ``clutter_doppler_hz``; 0 keeps
    it white.

    The target is a complex tone whose Doppler is redrawn every
    ``doppler_block`` pulses from N(target_doppler_hz, doppler_jitter_hz^2)
    with phase continuity.  When ``scr_db`` is set it overrides
    ``target_amplitude`` so that A^2 / clutter_power matches the SCR.
    """

    n_pulses: int = 16384
    prf_hz: float = 1000.0
    clutter_shape_nu: float = 1.0
    clutter_power: float = 1.0
    target_amplitude: float = 1.0
    target_doppler_hz: float = 100.0
    doppler_jitter_hz: float = 0.0
    scr_db: float | None = None
    seed: int = 0
    texture_coherence: int = 64
    speckle_bandwidth_hz: float = 0.0
    clutter_doppler_hz: float = 0.0
    doppler_block: int = 512

    def validate(self) -> None:
        reals = {
            "prf_hz": self.prf_hz,
            "clutter_shape_nu": self.clutter_shape_nu,
            "clutter_power": self.clutter_power,
            "target_amplitude": self.target_amplitude,
            "target_doppler_hz": self.target_doppler_hz,
            "doppler_jitter_hz": self.doppler_jitter_hz,
            "speckle_bandwidth_hz": self.speckle_bandwidth_hz,
            "clutter_doppler_hz": self.clutter_doppler_hz,
        }
        if self.scr_db is not None:
            reals["scr_db"] = self.scr_db
        for name, value in reals.items():
            if not math.isfinite(value):
                raise ValidationError(f"{name} must be finite, got {value}")
        if self.n_pulses < 1:
            raise ValidationError("n_pulses must be >= 1")
        if self.prf_hz <= 0:
            raise ValidationError("prf_hz must be > 0")
        if self.clutter_shape_nu <= 0:
            raise ValidationError("clutter_shape_nu must be > 0")
        if self.clutter_power < 0:
            raise ValidationError("clutter_power must be >= 0")
        if self.target_amplitude < 0:
            raise ValidationError("target_amplitude must be >= 0")
        if self.doppler_jitter_hz < 0 or self.speckle_bandwidth_hz < 0:
            raise ValidationError("jitter and bandwidth must be >= 0")
        if abs(self.target_doppler_hz) >= self.prf_hz / 2:
            raise ValidationError(
                f"|target_doppler_hz| must be < prf/2 = {self.prf_hz / 2} for unambiguous Doppler"
            )
        if self.texture_coherence < 1 or self.doppler_block < 1:
            raise ValidationError("texture_coherence and doppler_block must be >= 1")
        if self.scr_db is not None and self.clutter_power == 0:
            raise ValidationError("scr_db needs a positive clutter_power")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must fit in 64 unsigned bits")


def segment_echoes(
    series: EchoSeries, N: int, M: int, id_offset: int = 0
) -> list[ObservationVector]:
    """Cut ``series`` into windows x_i = series[M*(i-1) : M*(i-1)+N], i = 1, 2, ...

    Only windows lying entirely inside the series are produced.  Sample ids
    are assigned densely from ``id_offset``.
    """
    if N < 1 or M < 1:
        raise ValidationError(f"N and M must be >= 1, got N={N}, M={M}")
    n_total = len(series.samples)
    if n_total < N:
        raise EmptyInputError(f"series of length {n_total} is shorter than window N={N}")
    count = (n_total - N) // M + 1
    out = []
    for j in range(count):
        start = j * M
        out.append(
            ObservationVector(
                values=series.samples[start : start + N].copy(),
                label=series.cell_kind,
                sample_id=id_offset + j,
                time_index=j + 1,
            )
        )
    return out


def _speckle(rng: np.random.Generator, n: int, p: SceneParams) -> np.ndarray:
    g = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / math.sqrt(2.0)
    if p.speckle_bandwidth_hz <= 0:
        return g
    freqs = np.fft.fftfreq(n, d=1.0 / p.prf_hz)
    # wrap the offset onto the unambiguous interval so the spectrum is periodic
    df = (freqs - p.clutter_doppler_hz + p.prf_hz / 2) % p.prf_hz - p.prf_hz / 2
    psd = np.exp(-0.5 * (df / p.speckle_bandwidth_hz) ** 2)
    shaped = np.fft.ifft(np.fft.fft(g) * np.sqrt(psd / psd.mean()))
    return shaped


def _clutter(rng: np.random.Generator, p: SceneParams) -> np.ndarray:
    n = p.n_pulses
    if p.clutter_power == 0:
        return np.zeros(n, dtype=np.complex128)
    n_blocks = -(-n // p.texture_coherence)
    tau = rng.gamma(shape=p.clutter_shape_nu, scale=p.clutter_power / p.clutter_shape_nu, size=n_blocks)
    tau = np.repeat(tau, p.texture_coherence)[:n]
    return np.sqrt(tau) * _speckle(rng, n, p)


def _target(rng: np.random.Generator, p: SceneParams, amplitude: float) -> np.ndarray:
    n = p.n_pulses
    n_blocks = -(-n // p.doppler_block)
    fd = p.target_doppler_hz + p.doppler_jitter_hz * rng.standard_normal(n_blocks)
    fd = np.clip(fd, -p.prf_hz / 2 + 1e-9, p.prf_hz / 2 - 1e-9)
    per_pulse = np.repeat(fd, p.doppler_block)[:n]
    phi0 = rng.uniform(-math.pi, math.pi)
    # integrate frequency so the phase stays continuous across Doppler blocks
    phase = phi0 + 2 * math.pi * np.concatenate(([0.0], np.cumsum(per_pulse[:-1]))) / p.prf_hz
    return amplitude * np.exp(1j * phase)


def target_amplitude_for(params: SceneParams) -> float:
    if params.scr_db is None:
        return params.target_amplitude
    return math.sqrt(params.clutter_power * 10.0 ** (params.scr_db / 10.0))


def synthesize_scene(params: SceneParams) -> tuple[EchoSeries, EchoSeries]:
    """Return ``(target_cell, clutter_cell)`` for one synthetic scene."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    target_rng, clutter_rng, signal_rng = rng.spawn(3)
    amp = target_amplitude_for(params)
    target = _clutter(target_rng, params) + _target(signal_rng, params, amp)
    clutter = _clutter(clutter_rng, params)
    return (
        EchoSeries(target, params.prf_hz, Label.TARGET, cell_id=0),
        EchoSeries(clutter, params.prf_hz, Label.CLUTTER, cell_id=1),
    )


def _split_counts(n_max: int, train_frac: float, val_frac: float) -> tuple[int, int]:
    # tiny epsilon absorbs binary rounding such as 0.35 * 100 = 34.999...
    train_end = math.floor(train_frac * n_max + 1e-9)
    val_end = math.floor((train_frac + val_frac) * n_max + 1e-9)
    return train_end, val_end


def split_dataset(
    vectors: Sequence[ObservationVector], train_frac: float, val_frac: float
) -> tuple[list[ObservationVector], list[ObservationVector], list[ObservationVector]]:
    """Chronological train/validation/test split.

    Boundaries are placed on the time axis separately for each label group:
    vectors whose ``time_index`` falls in the first ``train_frac`` of the
    group's observation span go to train, the next ``val_frac`` to
    validation, the rest to test.  Nothing is shuffled.
    """
    if not vectors:
        raise EmptyInputError("cannot split an empty vector list")
    if not (train_frac > 0 and val_frac > 0 and train_frac + val_frac < 1):
        raise ValidationError(
            f"need 0 < train_frac, val_frac and train_frac + val_frac < 1, got {train_frac}, {val_frac}"
        )
    train, val, test = [], [], []
    for label in Label:
        group = [v for v in vectors if v.label == label]
        if not group:
            continue
        n_max = max(v.time_index for v in group)
        train_end, val_end = _split_counts(n_max, train_frac, val_frac)
        for v in group:
            if v.time_index <= train_end:
                train.append(v)
            elif v.time_index <= val_end:
                val.append(v)
            else:
                test.append(v)
    return train, val, test


# -- binary container ---------------------------------------------------------


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    """Write ``dataset`` to ``path`` in the RLLM little-endian binary format."""
    n = dataset.N
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, len(dataset.vectors), float(dataset.prf_hz)))
        for v in dataset.vectors:
            fh.write(_RECORD.pack(v.sample_id, int(v.label), v.time_index))
            fh.write(np.ascontiguousarray(v.values, dtype="<c16").tobytes())


def read_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, n, count, prf = _HEADER.unpack_from(raw, 0)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this reader supports {FORMAT_VERSION}")
    rec_size = _RECORD.size + 16 * n
    expected = _HEADER.size + count * rec_size
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vectors = []
    offset = _HEADER.size
    for _ in range(count):
        sample_id, label, time_index = _RECORD.unpack_from(raw, offset)
        offset += _RECORD.size
        values = np.frombuffer(raw, dtype="<c16", count=n, offset=offset).astype(np.complex128)
        offset += 16 * n
        vectors.append(ObservationVector(values, Label(label), sample_id, time_index))
    return Dataset(vectors, prf, n)


def write_echoes(path: str | Path, series: Sequence[EchoSeries]) -> None:
    """Store whole echo series in the dataset container.

    Each series becomes one record whose length is the series length; the
    record id carries ``cell_id`` and ``time_index`` is 0.  All series must
    share length and PRF.
    """
    if not series:
        raise EmptyInputError("no echo series to write")
    prfs = {s.prf_hz for s in series}
    if len(prfs) != 1:
        raise ValidationError("echo series must share one PRF")
    vectors = [ObservationVector(s.samples, s.cell_kind, s.cell_id, 0) for s in series]
    write_dataset(path, Dataset(vectors, prfs.pop()))


def read_echoes(path: str | Path) -> list[EchoSeries]:
    ds = read_dataset(path)
    return [
        EchoSeries(v.values, ds.prf_hz, v.label, cell_id=v.sample_id, source=Source.INGESTED)
        for v in ds.vectors
    ]


def dataset_checksum(dataset: Dataset) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<Id", dataset.N, dataset.prf_hz))
    for v in dataset.vectors:
        h.update(_RECORD.pack(v.sample_id, int(v.label), v.time_index))
        h.update(np.ascontiguousarray(v.values, dtype="<c16").tobytes())
    return h.hexdigest()


def write_csv(path: str | Path, dataset: Dataset) -> None:
    """Debug export: one row per vector, columns id,label,time_index,re_0,im_0,..."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["id", "label", "time_index"]
        for i in range(dataset.N):
            header += [f"re_{i}", f"im_{i}"]
        w.writerow(header)
        for v in dataset.vectors:
            row = [v.sample_id, int(v.label), v.time_index]
            for z in v.values:
                row += [repr(float(z.real)), repr(float(z.imag))]
            w.writerow(row)


def read_csv(path: str | Path, prf_hz: float) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["id", "label", "time_index"]:
        raise FormatError(f"{path}: not a dataset CSV export")
    vectors = []
    for row in rows[1:]:
        nums = np.array([float(x) for x in row[3:]])
        vectors.append(ObservationVector(nums[0::2] + 1j * nums[1::2], Label(int(row[1])), int(row[0]), int(row[2])))
    return Dataset(vectors, prf_hz)


def load_echo_csv(path: str | Path, prf_hz: float, cell_kind: Label, cell_id: int = 0) -> EchoSeries:
    """Ingest an externally converted echo sequence: a CSV with ``re,im`` columns, one row per pulse."""
    with open(path) as fh:
        first = fh.readline()
    # an optional header row such as "re,im" is skipped
    skip = 1 if first and not first.lstrip()[:1] in set("0123456789+-.nNiI#") else 0
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2, comments="#", skiprows=skip)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if data.shape[0] == 0 or data.shape[1] != 2:
        raise FormatError(f"{path}: expected rows of two columns (re, im), got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValidationError(f"{path}: echo samples must be finite")
    return EchoSeries(data[:, 0] + 1j * data[:, 1], prf_hz, cell_kind, cell_id, Source.INGESTED)


def build_dataset(
    series: Iterable[EchoSeries], N: int, M_target: int, M_clutter: int
) -> Dataset:
    """Segment every series (step depends on cell kind) into one dataset with dense ids."""
    vectors: list[ObservationVector] = []
    prf = None
    for s in series:
        prf = s.prf_hz if prf is None else prf
        if s.prf_hz != prf:
            raise ValidationError("all series in a dataset must share one PRF")
        step = M_target if s.cell_kind == Label.TARGET else M_clutter
        vectors.extend(segment_echoes(s, N, step, id_offset=len(vectors)))
    if prf is None:
        raise EmptyInputError("no echo series supplied")
    return Dataset(vectors, prf, N)

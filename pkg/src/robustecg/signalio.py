"""ECG records, the on-disk manifest format, resampling and filtering.

Records live on disk as headerless little-endian float32 blobs in lead-major
order; shape and metadata live in a JSON manifest next to them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import signal as sp_signal

from .errors import (
    BankTooShort,
    EmptyInput,
    InvalidBand,
    InvalidRate,
    InvalidSamples,
    MissingFile,
    ShapeMismatch,
)

STANDARD_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
NOISE_TYPES = ("baseline_wander", "muscle_artifact", "electrode_motion")

BLOB_DTYPE = np.dtype("<f4")
KAISER_BETA = 8.0


def default_lead_names(num_leads: int) -> tuple[str, ...]:
    if num_leads == len(STANDARD_LEADS):
        return STANDARD_LEADS
    return tuple(f"L{i + 1}" for i in range(num_leads))


@dataclass(frozen=True, eq=False)
class EcgRecord:
    """Multi-lead ECG with its sample rate and lead identities.

    ``samples`` has shape ``(num_leads, num_samples)`` in millivolts and is
    stored as float32, the blob dtype, so that records round-trip exactly.
    """

    samples: np.ndarray
    sample_rate_hz: int
    lead_names: tuple[str, ...] = ()
    record_id: str = ""

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ShapeMismatch(f"samples must be (leads, samples) with both >= 1, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidSamples(f"record {self.record_id!r} contains NaN or Inf")
        if int(self.sample_rate_hz) <= 0:
            raise InvalidRate(f"sample rate must be positive, got {self.sample_rate_hz}")
        names = tuple(self.lead_names) or default_lead_names(x.shape[0])
        if len(names) != x.shape[0]:
            raise ShapeMismatch(f"{len(names)} lead names for {x.shape[0]} leads")
        if len(set(names)) != len(names):
            raise ShapeMismatch(f"duplicate lead names: {names}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))
        object.__setattr__(self, "lead_names", names)

    @property
    def num_leads(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate_hz

    def with_samples(self, samples: np.ndarray) -> "EcgRecord":
        return replace(self, samples=samples)

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.sample_rate_hz == other.sample_rate_hz
            and self.lead_names == other.lead_names
            and self.record_id == other.record_id
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


@dataclass
class RecordEntry:
    record_id: str
    relative_path: str
    num_leads: int
    num_samples: int
    sample_rate_hz: int
    labels: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    report_codes: list[str] = field(default_factory=list)
    lead_names: list[str] | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "RecordEntry":
        return cls(
            record_id=str(d["record_id"]),
            relative_path=str(d["relative_path"]),
            num_leads=int(d["num_leads"]),
            num_samples=int(d["num_samples"]),
            sample_rate_hz=int(d["sample_rate_hz"]),
            labels=list(d.get("labels", [])),
            metadata=dict(d.get("metadata", {})),
            report_codes=list(d.get("report_codes", [])),
            lead_names=list(d["lead_names"]) if d.get("lead_names") else None,
        )

    def to_dict(self) -> dict:
        d = {
            "record_id": self.record_id,
            "relative_path": self.relative_path,
            "num_leads": self.num_leads,
            "num_samples": self.num_samples,
            "sample_rate_hz": self.sample_rate_hz,
            "labels": list(self.labels),
            "metadata": dict(self.metadata),
            "report_codes": list(self.report_codes),
        }
        if self.lead_names is not None:
            d["lead_names"] = list(self.lead_names)
        return d


@dataclass
class DatasetManifest:
    records: list[RecordEntry] = field(default_factory=list)
    base_dir: Path | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict[str, RecordEntry]:
        return {r.record_id: r for r in self.records}

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], self.base_dir)

    def load(self, entry: RecordEntry) -> EcgRecord:
        return load_record(entry, self.base_dir or Path("."))

    def load_all(self) -> list[EcgRecord]:
        return [self.load(e) for e in self.records]

    def to_json(self) -> dict:
        return {"records": [r.to_dict() for r in self.records]}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")
        return path


def read_manifest(path: str | Path) -> DatasetManifest:
    """Read a manifest; blob paths resolve relative to the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    return DatasetManifest([RecordEntry.from_dict(r) for r in doc["records"]], path.parent)


def load_record(entry: RecordEntry | Mapping, base_dir: str | Path) -> EcgRecord:
    if not isinstance(entry, RecordEntry):
        entry = RecordEntry.from_dict(entry)
    path = Path(base_dir) / entry.relative_path
    if not path.is_file():
        raise MissingFile(f"signal blob not found: {path}")
    raw = path.read_bytes()
    expected = BLOB_DTYPE.itemsize * entry.num_leads * entry.num_samples
    if len(raw) != expected:
        raise ShapeMismatch(
            f"{path}: {len(raw)} bytes, expected {expected} for "
            f"{entry.num_leads}x{entry.num_samples}"
        )
    x = np.frombuffer(raw, dtype=BLOB_DTYPE).reshape(entry.num_leads, entry.num_samples)
    if not np.all(np.isfinite(x)):
        raise InvalidSamples(f"record {entry.record_id!r} contains NaN or Inf")
    if not np.any(x):
        raise InvalidSamples(f"record {entry.record_id!r} is entirely zero")
    return EcgRecord(
        x.astype(np.float32),
        entry.sample_rate_hz,
        tuple(entry.lead_names) if entry.lead_names else (),
        entry.record_id,
    )


def write_blob(samples: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(samples, dtype=BLOB_DTYPE).tobytes())


def write_record(
    record: EcgRecord,
    base_dir: str | Path,
    relative_path: str | None = None,
    labels: Sequence[str] = (),
    metadata: Mapping | None = None,
    report_codes: Sequence[str] = (),
) -> RecordEntry:
    relative_path = relative_path or f"{record.record_id or 'record'}.f32"
    write_blob(record.samples, Path(base_dir) / relative_path)
    return RecordEntry(
        record_id=record.record_id,
        relative_path=relative_path,
        num_leads=record.num_leads,
        num_samples=record.num_samples,
        sample_rate_hz=record.sample_rate_hz,
        labels=list(labels),
        metadata=dict(metadata or {}),
        report_codes=list(report_codes),
        lead_names=list(record.lead_names),
    )


def _resample_array(x: np.ndarray, source_hz: int, target_hz: int) -> np.ndarray:
    if source_hz <= 0 or target_hz <= 0:
        raise InvalidRate(f"rates must be positive, got {source_hz} -> {target_hz}")
    if source_hz == target_hz:
        return x.copy()
    n = x.shape[-1]
    n_out = int(round(n * target_hz / source_hz))
    if n_out < 1:
        raise InvalidRate(f"{n} samples at {source_hz} Hz leave nothing at {target_hz} Hz")
    g = math.gcd(int(source_hz), int(target_hz))
    y = sp_signal.resample_poly(
        np.asarray(x, dtype=np.float64), target_hz // g, source_hz // g,
        axis=-1, window=("kaiser", KAISER_BETA),
    )
    return y[..., :n_out]


def resample(x, target_hz: int, source_hz: int | None = None):
    """Band-limited polyphase resampling to ``target_hz``.

    Accepts an :class:`EcgRecord` (rate taken from the record) or an array
    with ``source_hz`` given; returns the same kind. The output length is
    ``round(n * target_hz / source_hz)``.
    """
    if isinstance(x, EcgRecord):
        y = _resample_array(x.samples, x.sample_rate_hz, int(target_hz))
        return replace(x, samples=y, sample_rate_hz=int(target_hz))
    if source_hz is None:
        raise InvalidRate("source_hz is required for raw arrays")
    return _resample_array(np.asarray(x), int(source_hz), int(target_hz))


def bandpass(x: np.ndarray, fs: float, highpass_hz: float, lowpass_hz: float, order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth band-pass along the last axis.

    Edges are mirror-padded for one high-pass period. Odd padding would add
    a step at any non-zero endpoint, and the slow high-pass pole rings it
    through the whole record.
    """
    if not 0 < highpass_hz < lowpass_hz < fs / 2:
        raise InvalidBand(f"need 0 < {highpass_hz} < {lowpass_hz} < {fs / 2}")
    x = np.asarray(x, dtype=np.float64)
    sos = sp_signal.butter(order, [highpass_hz, lowpass_hz], btype="bandpass", fs=fs, output="sos")
    padlen = min(x.shape[-1] - 1, int(np.ceil(fs / highpass_hz)))
    return np.ascontiguousarray(sp_signal.sosfiltfilt(sos, x, axis=-1, padtype="even", padlen=padlen))


def band_filter(record: EcgRecord, highpass_hz: float = 0.5, lowpass_hz: float = 47.0) -> EcgRecord:
    return record.with_samples(bandpass(record.samples, record.sample_rate_hz, highpass_hz, lowpass_hz))


def signal_power(samples_1d) -> float:
    x = np.asarray(samples_1d, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("signal_power of an empty array")
    return float(np.mean(x * x))


@dataclass(frozen=True)
class NoiseBank:
    """Recorded noise segments, one 1-D array per noise type."""

    segments: Mapping[str, np.ndarray]
    sample_rate_hz: int

    def __post_init__(self):
        if not self.segments:
            raise EmptyInput("noise bank has no segments")
        unknown = set(self.segments) - set(NOISE_TYPES)
        if unknown:
            raise ShapeMismatch(f"unknown noise types: {sorted(unknown)}")
        segs = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in self.segments.items()}
        object.__setattr__(self, "segments", segs)

    @property
    def types(self) -> tuple[str, ...]:
        return tuple(t for t in NOISE_TYPES if t in self.segments)

    def min_length(self) -> int:
        return min(len(v) for v in self.segments.values())

    def prepared(self, target_hz: int) -> "NoiseBank":
        """Resample every segment to the ECG rate."""
        if target_hz == self.sample_rate_hz:
            return self
        segs = {k: resample(v, target_hz, self.sample_rate_hz) for k, v in self.segments.items()}
        return NoiseBank(segs, int(target_hz))

    def check_window(self, num_samples: int, sample_rate_hz: int) -> None:
        if sample_rate_hz != self.sample_rate_hz:
            raise InvalidRate(
                f"noise bank at {self.sample_rate_hz} Hz, record at {sample_rate_hz} Hz; call prepared()"
            )
        if self.min_length() < num_samples:
            raise BankTooShort(f"shortest noise segment {self.min_length()} < window {num_samples}")

    def window(self, noise_type: str, num_samples: int, rng: np.random.Generator) -> np.ndarray:
        seg = self.segments[noise_type]
        start = int(rng.integers(0, len(seg) - num_samples + 1))
        return seg[start:start + num_samples]


def read_noise_bank(path: str | Path) -> NoiseBank:
    """Read a noise manifest ``{"sample_rate_hz": fs, "segments": {type: blob}}``."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"noise manifest not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    segs = {}
    for name, rel in doc["segments"].items():
        blob = path.parent / rel
        if not blob.is_file():
            raise MissingFile(f"noise blob not found: {blob}")
        raw = blob.read_bytes()
        if len(raw) % BLOB_DTYPE.itemsize:
            raise ShapeMismatch(f"{blob}: byte length {len(raw)} is not a float32 multiple")
        segs[name] = np.frombuffer(raw, dtype=BLOB_DTYPE).astype(np.float64)
    return NoiseBank(segs, int(doc["sample_rate_hz"]))


def write_noise_bank(bank: NoiseBank, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rels = {}
    for name, seg in bank.segments.items():
        rels[name] = f"{name}.f32"
        write_blob(seg, directory / rels[name])
    path = directory / "noise.json"
    path.write_text(json.dumps({"sample_rate_hz": bank.sample_rate_hz, "segments": rels}, indent=1))
    return path

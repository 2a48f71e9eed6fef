"""Synthetic ECG corpora and noise banks for smoke runs and demos.

Records are trains of Gaussian-bump PQRST beats projected onto the leads
with fixed lead gains. Class 1 records additionally carry a narrow-band
atrial oscillation, so the two classes differ in spectral content; per-record
heart rate, amplitudes and background noise are nuisance variation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cfr import DEFAULT_ABBREVIATIONS, HashingEmbedder, build_diagnosis_db, bundled_diagnoses, compose_report
from .signalio import NOISE_TYPES, DatasetManifest, EcgRecord, NoiseBank, bandpass, write_record

# (offset s, width s, amplitude mV) for P, Q, R, S, T
_WAVES = ((-0.20, 0.025, 0.12), (-0.03, 0.010, -0.10), (0.0, 0.012, 1.0), (0.03, 0.010, -0.25), (0.25, 0.05, 0.30))

CLASS_CODES = (["NORM", "SR"], ["AFLT"])
CLASS_LABELS = ("NORM", "AFLT")


@dataclass
class SyntheticSpec:
    n_records: int = 256
    sample_rate_hz: int = 100
    duration_s: float = 10.0
    num_leads: int = 12
    flutter_hz: float = 5.0
    flutter_mv: float = 0.06
    background_mv: float = 0.05
    seed: int = 0


def lead_gains(num_leads: int, seed: int = 1234) -> tuple[np.ndarray, np.ndarray]:
    """Fixed per-lead gains for the beat and for the atrial oscillation."""
    rng = np.random.default_rng(seed)
    beat = rng.uniform(0.4, 1.2, num_leads) * rng.choice([-1.0, 1.0], num_leads, p=[0.2, 0.8])
    atrial = rng.uniform(0.3, 1.0, num_leads)
    return beat, atrial


def synth_record(label: int, spec: SyntheticSpec, rng: np.random.Generator, record_id: str = "") -> EcgRecord:
    fs = spec.sample_rate_hz
    n = int(round(spec.duration_s * fs))
    t = np.arange(n) / fs
    hr = rng.uniform(55, 95)
    rr = 60.0 / hr
    beat = np.zeros(n)
    onset = rng.uniform(0, rr)
    while onset < spec.duration_s + 0.5:
        for off, width, amp in _WAVES:
            beat += amp * np.exp(-0.5 * ((t - onset - off) / width) ** 2)
        onset += rr * rng.uniform(0.95, 1.05)
    g_beat, g_atrial = lead_gains(spec.num_leads)
    x = rng.uniform(0.7, 1.3) * g_beat[:, None] * beat[None, :]
    if label == 1:
        f = spec.flutter_hz * rng.uniform(0.9, 1.1)
        phase = rng.uniform(0, 2 * np.pi)
        # sawtooth-like: fundamental plus a weaker second harmonic
        wave = np.sin(2 * np.pi * f * t + phase) + 0.5 * np.sin(4 * np.pi * f * t + 2 * phase)
        x += spec.flutter_mv * rng.uniform(0.7, 1.3) * g_atrial[:, None] * wave[None, :]
    bg = rng.standard_normal((spec.num_leads, n))
    bg = bandpass(bg, fs, 0.5, min(40.0, fs / 2 - 1))
    bg /= bg.std(axis=1, keepdims=True)
    x += spec.background_mv * bg
    return EcgRecord(x, fs, record_id=record_id)


@dataclass
class SyntheticCorpus:
    records: list[EcgRecord]
    labels: np.ndarray
    metadata: list[dict]
    codes: list[list[str]]
    reports: dict[str, str]

    def label_matrix(self) -> np.ndarray:
        """One-hot ``(n, 2)`` targets in :data:`CLASS_LABELS` order."""
        y = np.zeros((len(self.labels), 2))
        y[np.arange(len(self.labels)), self.labels] = 1
        return y

    def write(self, directory: str | Path) -> DatasetManifest:
        directory = Path(directory)
        entries = [
            write_record(r, directory, f"signals/{r.record_id}.f32",
                         labels=[CLASS_LABELS[int(y)]], metadata=m, report_codes=c)
            for r, y, m, c in zip(self.records, self.labels, self.metadata, self.codes)
        ]
        manifest = DatasetManifest(entries, directory)
        manifest.save(directory / "manifest.json")
        return manifest


def make_corpus(spec: SyntheticSpec | None = None, embedder=None) -> SyntheticCorpus:
    """Balanced two-class corpus with templated reports built by retrieval."""
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    labels = np.arange(spec.n_records) % 2
    rng.shuffle(labels)
    embedder = embedder or HashingEmbedder()
    db = build_diagnosis_db(bundled_diagnoses(), embedder)
    records, metadata, codes, reports = [], [], [], {}
    for i, y in enumerate(labels):
        rid = f"syn{spec.seed:03d}_{i:05d}"
        records.append(synth_record(int(y), spec, rng, rid))
        meta = {"age": int(rng.integers(25, 90)), "sex": str(rng.choice(["male", "female"]))}
        metadata.append(meta)
        codes.append(list(CLASS_CODES[int(y)]))
        reports[rid] = compose_report(meta, codes[-1], DEFAULT_ABBREVIATIONS, db, embedder)
    return SyntheticCorpus(records, labels, metadata, codes, reports)


def make_noise_bank(duration_s: float = 120.0, sample_rate_hz: int = 360, seed: int = 7) -> NoiseBank:
    """Stand-in for recorded ambulatory noise: wander, muscle and electrode motion."""
    rng = np.random.default_rng(seed)
    fs = sample_rate_hz
    n = int(duration_s * fs)
    t = np.arange(n) / fs
    wander = sum(rng.uniform(0.1, 0.4) * np.sin(2 * np.pi * rng.uniform(0.05, 0.5) * t + rng.uniform(0, 6.3))
                 for _ in range(4))
    wander += np.cumsum(rng.standard_normal(n)) * 0.002
    wander -= wander.mean()
    muscle = bandpass(rng.standard_normal(n), fs, 20.0, min(150.0, fs / 2 - 1)) * 0.1
    steps = np.zeros(n)
    for pos in rng.choice(n, size=max(int(duration_s / 3), 1), replace=False):
        steps[pos:] += rng.normal(0, 0.3)
    motion = bandpass(steps + rng.standard_normal(n) * 0.02, fs, 0.3, 20.0)
    segs = dict(zip(NOISE_TYPES, (wander, muscle, motion)))
    return NoiseBank(segs, fs)


def smoke_pretrain_config(**optim):
    """Small pretraining config sized for CPU smoke runs on :func:`make_corpus` data.

    Loss weights, temperatures, center and EMA schedules keep their defaults;
    only model width and the schedule shrink. Keyword arguments override
    :class:`~robustecg.trainer.OptimConfig` fields.
    """
    from .encoder import EncoderConfig, HeadConfig
    from .trainer import OptimConfig, PretrainConfig

    return PretrainConfig(
        encoder=EncoderConfig(stage_depths=[2, 2], stage_widths=[16, 32]),
        heads=HeadConfig(proj_dim=32, dino_hidden=128, dino_bottleneck=32, dino_out=256,
                         text_buckets=2048, text_dim=32),
        optim=OptimConfig(**{"batch_size": 32, "epochs": 25, **optim}),
    )

"""Lead masking and noise injection.

Produces the lightly corrupted (minor) and heavily corrupted (major) views
used for distillation, and the corrupted variants of downstream datasets.
All randomness comes from a caller-supplied ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigError, LengthMismatch, UnsupportedLeadCount
from .signalio import EcgRecord, NoiseBank, band_filter, signal_power

MASK, NOISE = "mask", "noise"
VARIANTS = ("original", "lead_missing", "noisy", "lead_missing_noisy")

# leads below this power get no noise: the scale factor is undefined
MIN_LEAD_POWER = 1e-12


@dataclass
class CorruptionConfig:
    n_major: int = 8
    k_minor: int = 2
    major_keep_range: tuple[int, int] = (1, 6)
    minor_keep_range: tuple[int, int] = (6, 12)
    per_type_noise_p: float = 0.7
    per_lead_noise_p: float = 0.5
    snr_db_range: tuple[float, float] = (-10.0, 0.0)
    high_snr_db_range: tuple[float, float] = (10.0, 20.0)
    minor_filter_band: tuple[float, float] = (0.5, 47.0)
    downstream_mask_p: float = 0.5
    downstream_noise_p: float = 0.5

    def __post_init__(self):
        for name in ("major_keep_range", "minor_keep_range", "snr_db_range",
                     "high_snr_db_range", "minor_filter_band"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.n_major < 1:
            raise ConfigError(f"n_major must be >= 1, got {self.n_major}")
        if self.k_minor < 2:
            raise ConfigError(f"k_minor must be >= 2 (original + filtered), got {self.k_minor}")
        for name in ("major_keep_range", "minor_keep_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        for name in ("snr_db_range", "high_snr_db_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty: {(lo, hi)}")
        for name in ("per_type_noise_p", "per_lead_noise_p", "downstream_mask_p", "downstream_noise_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionConfig":
        return cls(**d)


@dataclass(frozen=True)
class LeadMask:
    keep: np.ndarray

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool).ravel()
        if not keep.any():
            raise ConfigError("a lead mask must keep at least one lead")
        object.__setattr__(self, "keep", keep)

    @property
    def count(self) -> int:
        return int(self.keep.sum())


@dataclass
class ViewBatch:
    """Minor views first: the teacher consumes indices ``[0, k_minor)``."""

    minor_views: list[EcgRecord]
    major_views: list[EcgRecord]
    mode: str
    source_id: str = ""

    @property
    def views(self) -> list[EcgRecord]:
        return self.minor_views + self.major_views

    def stacked(self) -> np.ndarray:
        return np.stack([v.samples for v in self.views])


@dataclass
class NoiseDraw:
    """What one injection call decided; empty ``types`` means nothing was added."""

    types: tuple[str, ...] = ()
    snr_db: float | None = None
    leads: tuple[int, ...] = ()
    scales: dict[int, float] = field(default_factory=dict)


def sample_lead_mask(
    level: Literal["major", "minor"],
    num_leads: int,
    rng: np.random.Generator,
    config: CorruptionConfig | None = None,
) -> LeadMask:
    config = config or CorruptionConfig()
    if level not in ("major", "minor"):
        raise ConfigError(f"unknown mask level {level!r}")
    lo, hi = config.major_keep_range if level == "major" else config.minor_keep_range
    if num_leads < hi:
        if level == "minor":
            raise UnsupportedLeadCount(
                f"minor masks keep {lo}..{hi} leads; record has {num_leads}"
            )
        hi = num_leads
        lo = min(lo, hi)
    k = int(rng.integers(lo, hi + 1))
    return fixed_count_mask(num_leads, k, rng)


def fixed_count_mask(num_leads: int, k: int, rng: np.random.Generator) -> LeadMask:
    """Keep exactly ``k`` leads chosen uniformly without replacement."""
    if not 1 <= k <= num_leads:
        raise ConfigError(f"cannot keep {k} of {num_leads} leads")
    keep = np.zeros(num_leads, dtype=bool)
    keep[rng.choice(num_leads, size=k, replace=False)] = True
    return LeadMask(keep)


def apply_lead_mask(record: EcgRecord, mask: LeadMask | np.ndarray) -> EcgRecord:
    keep = mask.keep if isinstance(mask, LeadMask) else np.asarray(mask, dtype=bool)
    if keep.shape != (record.num_leads,):
        raise LengthMismatch(f"mask of length {keep.size} for {record.num_leads} leads")
    return record.with_samples(np.where(keep[:, None], record.samples, np.float32(0.0)))


def noise_scale(signal_pow: float, noise_pow: float, snr_db: float) -> float:
    """Factor that puts noise of power ``noise_pow`` at ``snr_db`` below the signal."""
    return float(np.sqrt(signal_pow / (noise_pow * 10.0 ** (snr_db / 10.0))))


def draw_noise(
    record: EcgRecord,
    bank: NoiseBank,
    config: CorruptionConfig,
    rng: np.random.Generator,
    *,
    snr_db: float | None = None,
    snr_range: tuple[float, float] | None = None,
    per_lead_p: float | None = None,
    per_type_p: float | None = None,
) -> tuple[EcgRecord, NoiseDraw]:
    """Inject bank noise and report what was drawn.

    Each noise type is included independently; the included windows are
    summed into one composite, and the composite is scaled per lead so the
    clean-lead to added-noise power ratio equals one SNR drawn for the call.
    Each lead receives noise independently with ``per_lead_p``.
    """
    bank.check_window(record.num_samples, record.sample_rate_hz)
    p_type = config.per_type_noise_p if per_type_p is None else per_type_p
    p_lead = config.per_lead_noise_p if per_lead_p is None else per_lead_p

    types = tuple(t for t in bank.types if rng.random() < p_type)
    if not types:
        return record, NoiseDraw()
    composite = sum(bank.window(t, record.num_samples, rng) for t in types)
    if snr_db is None:
        lo, hi = snr_range or config.snr_db_range
        snr_db = float(rng.uniform(lo, hi))
    hit = np.flatnonzero(rng.random(record.num_leads) < p_lead)

    noise_pow = signal_power(composite)
    out = record.samples.astype(np.float64)
    scales = {}
    if noise_pow > 0:
        for lead in hit:
            lead_pow = signal_power(out[lead])
            if lead_pow < MIN_LEAD_POWER:
                continue
            a = noise_scale(lead_pow, noise_pow, snr_db)
            out[lead] = out[lead] + a * composite
            scales[int(lead)] = a
    if not scales:
        return record, NoiseDraw(types, snr_db, (), {})
    noisy = record.samples.copy()
    idx = list(scales)
    noisy[idx] = out[idx]
    return record.with_samples(noisy), NoiseDraw(types, snr_db, tuple(idx), scales)


def inject_noise(
    record: EcgRecord,
    bank: NoiseBank,
    config: CorruptionConfig,
    rng: np.random.Generator,
    **overrides,
) -> EcgRecord:
    return draw_noise(record, bank, config, rng, **overrides)[0]


def build_views(
    record: EcgRecord,
    mode: Literal["mask", "noise"],
    bank: NoiseBank | None,
    config: CorruptionConfig,
    rng: np.random.Generator,
) -> ViewBatch:
    if mode == MASK:
        minor = [apply_lead_mask(record, sample_lead_mask("minor", record.num_leads, rng, config))
                 for _ in range(config.k_minor)]
        major = [apply_lead_mask(record, sample_lead_mask("major", record.num_leads, rng, config))
                 for _ in range(config.n_major)]
    elif mode == NOISE:
        if bank is None:
            raise ConfigError("noise views need a noise bank")
        minor = [record, band_filter(record, *config.minor_filter_band)]
        for _ in range(config.k_minor - 2):
            minor.append(inject_noise(record, bank, config, rng, snr_range=config.high_snr_db_range))
        major = [inject_noise(record, bank, config, rng) for _ in range(config.n_major)]
    else:
        raise ConfigError(f"unknown view mode {mode!r}")
    return ViewBatch(minor, major, mode, record.record_id)


def random_lead_dropout(num_leads: int, p_mask: float, rng: np.random.Generator) -> LeadMask:
    """Zero each lead with ``p_mask``, redrawing until at least one survives."""
    if p_mask >= 1.0:
        raise ConfigError("p_mask = 1 can never retain a lead")
    while True:
        keep = rng.random(num_leads) >= p_mask
        if keep.any():
            return LeadMask(keep)


def build_variant_record(
    record: EcgRecord,
    variant: str,
    bank: NoiseBank | None,
    config: CorruptionConfig,
    rng: np.random.Generator,
) -> EcgRecord:
    if variant == "original":
        return record
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    out = record
    if variant in ("noisy", "lead_missing_noisy"):
        if bank is None:
            raise ConfigError(f"variant {variant!r} needs a noise bank")
        out = inject_noise(out, bank, config, rng, per_lead_p=config.downstream_noise_p)
    if variant in ("lead_missing", "lead_missing_noisy"):
        out = apply_lead_mask(out, random_lead_dropout(out.num_leads, config.downstream_mask_p, rng))
    return out


def corrupt_batch(
    records: Sequence[EcgRecord],
    mode: str,
    bank: NoiseBank | None,
    config: CorruptionConfig,
    rng: np.random.Generator,
) -> list[ViewBatch]:
    return [build_views(r, mode, bank, config, rng) for r in records]

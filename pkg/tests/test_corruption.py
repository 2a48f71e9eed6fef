import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from robustecg.corruption import (
    CorruptionConfig,
    LeadMask,
    apply_lead_mask,
    build_variant_record,
    build_views,
    draw_noise,
    inject_noise,
    noise_scale,
    random_lead_dropout,
    sample_lead_mask,
)
from robustecg.errors import ConfigError, LengthMismatch, UnsupportedLeadCount, BankTooShort
from robustecg.signalio import EcgRecord, NoiseBank, band_filter, signal_power


@pytest.fixture(scope="module")
def bank():
    rng = np.random.default_rng(11)
    return NoiseBank({
        "baseline_wander": np.cumsum(rng.standard_normal(20000)) * 0.01,
        "muscle_artifact": rng.standard_normal(20000) * 0.1,
        "electrode_motion": np.sin(np.arange(20000) / 37.0) * 0.3,
    }, 500)


@pytest.fixture
def record():
    return EcgRecord(np.random.default_rng(3).standard_normal((12, 2000)), 500, record_id="x")


def measured_snr(clean, noisy, lead):
    added = noisy.samples[lead].astype(np.float64) - clean.samples[lead].astype(np.float64)
    return 10 * np.log10(signal_power(clean.samples[lead]) / signal_power(added))


class TestConfig:
    def test_default_view_counts(self):
        c = CorruptionConfig()
        assert (c.n_major, c.k_minor) == (8, 2)
        assert c.major_keep_range == (1, 6) and c.minor_keep_range == (6, 12)
        assert c.per_type_noise_p == 0.7 and c.per_lead_noise_p == 0.5
        assert c.snr_db_range == (-10.0, 0.0)

    @pytest.mark.parametrize("kw", [{"k_minor": 1}, {"n_major": 0}, {"per_lead_noise_p": 1.5},
                                    {"major_keep_range": (0, 6)}, {"snr_db_range": (0, -10)}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            CorruptionConfig(**kw)


class TestLeadMask:
    def test_minor_full_keep_is_identity(self, record):
        cfg = CorruptionConfig(minor_keep_range=(12, 12))
        m = sample_lead_mask("minor", 12, np.random.default_rng(0), cfg)
        assert m.keep.all()
        assert apply_lead_mask(record, m) == record

    def test_counts_always_in_range(self):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            assert 1 <= sample_lead_mask("major", 12, rng).count <= 6
            assert 6 <= sample_lead_mask("minor", 12, rng).count <= 12

    def test_major_count_uniform(self):
        rng = np.random.default_rng(2)
        counts = np.bincount([sample_lead_mask("major", 12, rng).count for _ in range(100_000)], minlength=7)[1:]
        assert chisquare(counts).pvalue > 0.01

    def test_minor_needs_twelve_leads(self):
        with pytest.raises(UnsupportedLeadCount):
            sample_lead_mask("minor", 2, np.random.default_rng(0))

    def test_major_clipped_for_few_leads(self):
        rng = np.random.default_rng(0)
        assert all(1 <= sample_lead_mask("major", 2, rng).count <= 2 for _ in range(100))

    def test_empty_mask_rejected(self):
        with pytest.raises(ConfigError):
            LeadMask(np.zeros(12, bool))


class TestApplyLeadMask:
    def test_all_true(self, record):
        assert apply_lead_mask(record, np.ones(12, bool)) == record

    def test_only_lead_two(self, record):
        keep = np.zeros(12, bool)
        keep[1] = True
        out = apply_lead_mask(record, keep)
        nonzero = np.flatnonzero(np.any(out.samples != 0, axis=1))
        assert nonzero.tolist() == [1]
        np.testing.assert_array_equal(out.samples[1], record.samples[1])

    def test_energy(self, record):
        keep = np.random.default_rng(4).random(12) < 0.5
        keep[0] = True
        out = apply_lead_mask(record, keep)
        e_in = sum(np.sum(record.samples[i].astype(np.float64) ** 2) for i in np.flatnonzero(keep))
        assert np.sum(out.samples.astype(np.float64) ** 2) == pytest.approx(e_in, rel=1e-12)

    def test_length_mismatch(self, record):
        with pytest.raises(LengthMismatch):
            apply_lead_mask(record, np.ones(11, bool))


class TestInjectNoise:
    def test_no_type_drawn_is_identity(self, record, bank):
        cfg = CorruptionConfig()
        # find a stream whose three type draws all miss
        seed = next(s for s in range(1000) if (np.random.default_rng(s).random(3) >= 0.7).all())
        out = inject_noise(record, bank, cfg, np.random.default_rng(seed))
        assert out == record

    def test_scale_factors(self):
        assert noise_scale(1.0, 1.0, 0.0) == pytest.approx(1.0)
        assert noise_scale(1.0, 1.0, -10.0) == pytest.approx(np.sqrt(10), rel=1e-12)

    def test_minus_ten_db_measured(self, bank):
        t = np.arange(2000) / 500
        x = np.sqrt(2) * np.sin(2 * np.pi * 7 * t)  # unit power
        rec = EcgRecord(np.tile(x, (12, 1)), 500)
        out, draw = draw_noise(rec, bank, CorruptionConfig(), np.random.default_rng(0),
                               snr_db=-10.0, per_lead_p=1.0, per_type_p=1.0)
        assert len(draw.leads) == 12
        for lead in draw.leads:
            assert abs(measured_snr(rec, out, lead) + 10.0) < 0.1

    def test_unaffected_leads_bit_identical(self, record, bank):
        for s in range(30):
            out, draw = draw_noise(record, bank, CorruptionConfig(), np.random.default_rng(s))
            untouched = sorted(set(range(12)) - set(draw.leads))
            np.testing.assert_array_equal(out.samples[untouched], record.samples[untouched])

    def test_zero_power_lead_skipped(self, bank):
        x = np.random.default_rng(0).standard_normal((12, 2000))
        x[3] = 0
        rec = EcgRecord(x, 500)
        out, draw = draw_noise(rec, bank, CorruptionConfig(), np.random.default_rng(0),
                               per_lead_p=1.0, per_type_p=1.0)
        assert 3 not in draw.leads
        assert not out.samples[3].any()

    def test_bank_too_short(self, bank):
        rec = EcgRecord(np.ones((12, 30000)), 500)
        with pytest.raises(BankTooShort):
            inject_noise(rec, bank, CorruptionConfig(), np.random.default_rng(0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_snr_property(self, bank, seed):
        rng = np.random.default_rng(seed)
        rec = EcgRecord(rng.normal(0, rng.uniform(0.1, 3), (12, 2000)), 500)
        out, draw = draw_noise(rec, bank, CorruptionConfig(), rng)
        for lead in draw.leads:
            assert abs(measured_snr(rec, out, lead) - draw.snr_db) <= 0.1
        if draw.snr_db is not None:
            assert -10 <= draw.snr_db <= 0


class TestBuildViews:
    def test_mask_mode_counts(self, record):
        vb = build_views(record, "mask", None, CorruptionConfig(), np.random.default_rng(0))
        assert len(vb.minor_views) == 2 and len(vb.major_views) == 8
        assert vb.stacked().shape == (10, 12, 2000)
        for v in vb.minor_views:
            assert np.any(v.samples != 0, axis=1).sum() >= 6
        for v in vb.major_views:
            assert 1 <= np.any(v.samples != 0, axis=1).sum() <= 6

    def test_noise_mode_minor_views(self, record, bank):
        vb = build_views(record, "noise", bank, CorruptionConfig(), np.random.default_rng(0))
        assert vb.minor_views[0] == record
        np.testing.assert_allclose(vb.minor_views[1].samples, band_filter(record, 0.5, 47).samples)
        assert len(vb.major_views) == 8

    def test_extra_minor_noise_views(self, record, bank):
        cfg = CorruptionConfig(k_minor=4)
        vb = build_views(record, "noise", bank, cfg, np.random.default_rng(1))
        assert len(vb.minor_views) == 4

    def test_noise_mode_needs_bank(self, record):
        with pytest.raises(ConfigError):
            build_views(record, "noise", None, CorruptionConfig(), np.random.default_rng(0))

    @pytest.mark.parametrize("mode", ["mask", "noise"])
    def test_deterministic(self, record, bank, mode):
        a = build_views(record, mode, bank, CorruptionConfig(), np.random.default_rng(9))
        b = build_views(record, mode, bank, CorruptionConfig(), np.random.default_rng(9))
        np.testing.assert_array_equal(a.stacked(), b.stacked())


class TestVariants:
    def test_original_identity(self, record, bank):
        assert build_variant_record(record, "original", bank, CorruptionConfig(), np.random.default_rng(0)) is record

    def test_lead_missing_statistics(self):
        rng = np.random.default_rng(5)
        kept = np.array([random_lead_dropout(12, 0.5, rng).count for _ in range(100_000)])
        assert kept.min() >= 1
        expected = 0.5 / (1 - 0.5 ** 12)
        assert abs(kept.mean() / 12 - expected) < 0.005

    def test_lead_missing_noisy_order(self, record, bank):
        cfg = CorruptionConfig()
        for seed in range(10):
            got = build_variant_record(record, "lead_missing_noisy", bank, cfg, np.random.default_rng(seed))
            rng = np.random.default_rng(seed)
            noisy = inject_noise(record, bank, cfg, rng, per_lead_p=cfg.downstream_noise_p)
            expected = apply_lead_mask(noisy, random_lead_dropout(12, cfg.downstream_mask_p, rng))
            assert got == expected

    def test_pinned_survival_single_type(self, record):
        one = NoiseBank({"muscle_artifact": np.random.default_rng(0).standard_normal(5000)}, 500)
        cfg = CorruptionConfig(per_type_noise_p=1.0, downstream_mask_p=0.0)
        got = build_variant_record(record, "lead_missing_noisy", one, cfg, np.random.default_rng(3))
        ref = inject_noise(record, one, cfg, np.random.default_rng(3), per_lead_p=cfg.downstream_noise_p)
        assert got == apply_lead_mask(ref, np.ones(12, bool))
        assert got != record

    def test_unknown_variant(self, record, bank):
        with pytest.raises(ConfigError):
            build_variant_record(record, "blurry", bank, CorruptionConfig(), np.random.default_rng(0))

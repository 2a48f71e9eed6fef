import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import ap_oracle, auroc_oracle
from robustecg.cfr import raw_report
from robustecg.corruption import VARIANTS, CorruptionConfig
from robustecg.encoder import EcgEncoder, EncoderConfig, HeadConfig
from robustecg.errors import ConfigError, DegenerateLabels, NoPositives
from robustecg.evalkit import (
    FRAMEWORKS,
    AblationData,
    FinetuneConfig,
    FinetunedModel,
    LabelSet,
    SweepTable,
    ablation_frameworks,
    ablation_sweep,
    aggregate_variants,
    average_precision,
    auroc,
    build_variant_dataset,
    finetune,
    framework_config,
    multilabel_metrics,
    write_table,
)
from robustecg.signalio import read_manifest
from robustecg.synthetic import CLASS_LABELS, SyntheticSpec, make_corpus, make_noise_bank
from robustecg.trainer import OptimConfig, PretrainConfig, TrainState

TINY = EncoderConfig(stage_depths=[1, 1], stage_widths=[8, 16])


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(SyntheticSpec(n_records=40, duration_s=5, seed=2))


@pytest.fixture(scope="module")
def bank():
    return make_noise_bank(duration_s=30)


@pytest.fixture(scope="module")
def labels():
    return LabelSet("all", list(CLASS_LABELS))


class TestAuroc:
    def test_perfect(self):
        assert auroc([.9, .8, .3, .1], [1, 1, 0, 0]) == 1.0

    def test_worked_example(self):
        assert auroc([.9, .6, .4, .1], [1, 0, 1, 0]) == 0.75

    def test_all_ties(self):
        assert auroc([.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_one_class(self):
        with pytest.raises(DegenerateLabels):
            auroc([.1, .2], [1, 1])

    @pytest.mark.parametrize("seed", range(1000))
    def test_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 201))
        s = rng.integers(0, 10, n) / 10 if seed % 2 else rng.random(n)  # half with many ties
        y = rng.random(n) < rng.uniform(0.1, 0.9)
        y[0], y[1] = True, False
        assert auroc(s, y) == pytest.approx(auroc_oracle(s.tolist(), y.tolist()), abs=1e-9)


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([.9, .8, .3, .1], [1, 1, 0, 0]) == 1.0

    def test_worked_example(self):
        assert average_precision([.9, .6, .4, .1], [1, 0, 1, 0]) == pytest.approx(5 / 6, abs=1e-15)

    @pytest.mark.parametrize("n", [2, 5, 50])
    def test_single_positive_last(self, n):
        y = np.zeros(n)
        y[-1] = 1
        assert average_precision(-np.arange(n), y) == pytest.approx(1 / n, abs=1e-15)

    def test_no_positives(self):
        with pytest.raises(NoPositives):
            average_precision([.1, .2], [0, 0])

    @pytest.mark.parametrize("seed", range(1000))
    def test_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 201))
        s = rng.integers(0, 10, n) / 10 if seed % 2 else rng.random(n)
        y = rng.random(n) < rng.uniform(0.1, 0.9)
        y[0] = True
        assert average_precision(s, y) == pytest.approx(ap_oracle(s.tolist(), y.tolist()), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_invariant_under_monotone_maps(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    s = rng.normal(size=n)
    y = rng.random(n) < 0.5
    y[0], y[1] = True, False
    for f in (np.exp, lambda v: 3 * v + 1, lambda v: v ** 3):
        assert auroc(f(s), y) == pytest.approx(auroc(s, y), abs=1e-12)
        assert average_precision(f(s), y) == pytest.approx(average_precision(s, y), abs=1e-12)


class TestMultilabel:
    def test_macro_and_skipped(self):
        scores = np.array([[.9, .1, .5], [.2, .8, .5], [.7, .3, .5]])
        targets = np.array([[1, 0, 1], [0, 1, 1], [1, 0, 1]])
        rep = multilabel_metrics(scores, targets, ["a", "b", "c"])
        assert rep.skipped == ["c"]
        assert rep.macro_auc == 1.0 and rep.macro_ap == 1.0

    def test_label_targets(self):
        ls = LabelSet("superclass", ["NORM", "MI"], {"IMI": "MI", "SR": "NORM"})
        y, dropped = ls.targets([["SR"], ["IMI", "XYZ"], []])
        assert y.tolist() == [[1, 0], [0, 1], [0, 0]] and dropped == 1


class TestVariants:
    def test_original_identity(self, corpus, tmp_path, bank):
        m = corpus.write(tmp_path / "src")
        assert build_variant_dataset(m, "original", bank, CorruptionConfig(), 0) is m
        out = build_variant_dataset(m, "original", bank, CorruptionConfig(), 0, tmp_path / "orig")
        for a, b in zip(m, out):
            assert (m.base_dir / a.relative_path).read_bytes() == (out.base_dir / b.relative_path).read_bytes()

    def test_rebuild_is_bit_identical(self, corpus, tmp_path, bank):
        m = corpus.write(tmp_path / "src")
        a = build_variant_dataset(m, "lead_missing_noisy", bank, CorruptionConfig(), 5, tmp_path / "a")
        b = build_variant_dataset(m, "lead_missing_noisy", bank, CorruptionConfig(), 5, tmp_path / "b")
        for x, y in zip(a, b):
            assert (a.base_dir / x.relative_path).read_bytes() == (b.base_dir / y.relative_path).read_bytes()
        assert read_manifest(tmp_path / "a" / "manifest.json").records[0].labels == m.records[0].labels

    def test_aggregate_count(self, bank):
        corpus = make_corpus(SyntheticSpec(n_records=100, duration_s=2, seed=3))
        xs, ys = aggregate_variants(corpus.records, corpus.label_matrix(), bank, CorruptionConfig(), 0)
        assert len(xs) == 400 and ys.shape == (400, 2)


class TestFinetune:
    def test_frozen_encoder_unchanged(self, corpus, labels, bank):
        torch.manual_seed(0)
        enc = EcgEncoder(TINY)
        before = {k: v.clone() for k, v in enc.state_dict().items()}
        y = corpus.label_matrix()
        model = finetune(enc, (corpus.records[:30], y[:30]), (corpus.records[30:], y[30:]), labels,
                         FinetuneConfig(lr=1e-2, epochs=2, freeze_encoder=True), bank)
        after = model.model.encoder.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_label_without_positives_skipped(self, corpus, bank):
        ls = LabelSet("all", [*CLASS_LABELS, "NEVER"])
        y = np.c_[corpus.label_matrix(), np.zeros(len(corpus.records))]
        model = finetune(None, (corpus.records[:30], y[:30]), (corpus.records[30:], y[30:]), ls,
                         FinetuneConfig(lr=1e-3, epochs=1, variants=("original",)), encoder_config=TINY)
        assert model.skipped == ["NEVER"]
        assert "NEVER" in model.evaluate(corpus.records[30:], y[30:]).skipped

    def test_separable_reaches_one(self, labels):
        corpus = make_corpus(SyntheticSpec(n_records=48, duration_s=5, seed=4, flutter_mv=0.3))
        y = corpus.label_matrix()
        model = finetune(None, (corpus.records, y), (corpus.records, y), labels,
                         FinetuneConfig(lr=3e-3, epochs=50, variants=("original",), patience=5), encoder_config=TINY)
        assert model.best_val_auc == pytest.approx(1.0)

    def test_save_load(self, corpus, labels, tmp_path):
        y = corpus.label_matrix()
        model = finetune(None, (corpus.records[:20], y[:20]), (corpus.records[20:], y[20:]), labels,
                         FinetuneConfig(epochs=1, variants=("original",)), encoder_config=TINY)
        back = FinetunedModel.load(model.save(tmp_path / "m"))
        np.testing.assert_array_equal(back.predict(corpus.records[:5]), model.predict(corpus.records[:5]))


class TestSweep:
    @pytest.fixture(scope="class")
    @classmethod
    def model(cls, corpus, labels):
        y = corpus.label_matrix()
        return finetune(None, (corpus.records, y), (corpus.records, y), labels,
                        FinetuneConfig(lr=3e-3, epochs=3, variants=("original",)), encoder_config=TINY)

    def test_full_leads_equal_clean(self, model, corpus):
        y = corpus.label_matrix()
        table = ablation_sweep(model, corpus.records, y, "lead_count", [12], seed=0)
        assert table.macro_auc[0] == model.evaluate(corpus.records, y).macro_auc

    def test_high_snr_near_clean(self, model, corpus, bank):
        y = corpus.label_matrix()
        table = ablation_sweep(model, corpus.records, y, "snr_db", [40], bank, seed=0)
        assert abs(table.macro_auc[0] - model.evaluate(corpus.records, y).macro_auc) <= 0.01

    def test_bad_lead_count(self, model, corpus):
        with pytest.raises(ConfigError):
            ablation_sweep(model, corpus.records, corpus.label_matrix(), "lead_count", [0])

    def test_csv_and_plot_data(self, tmp_path):
        t = SweepTable("snr_db", [-10.0, 0.0, 40.0], [0.5, 0.6, 0.9])
        back = SweepTable.from_csv(t.to_csv(tmp_path / "s.csv"))
        assert back == t
        series = back.plot_data()["series"][0]
        assert series["x"] == [-10.0, 0.0, 40.0] and series["y"] == [0.5, 0.6, 0.9]


class TestFrameworks:
    def test_toggles(self):
        base = PretrainConfig(encoder=TINY)
        assert len(TrainState(framework_config(base, "unidistill")).teachers) == 1
        assert len(TrainState(framework_config(base, "duodistill")).teachers) == 2
        assert framework_config(base, "reportalign_raw").data["report_source"] == "raw"
        assert framework_config(base, "reportalign_cfr").weights.beta == 0
        with pytest.raises(ConfigError):
            framework_config(base, "nope")

    def test_table_shape(self, corpus, labels, bank, tmp_path):
        y = corpus.label_matrix()
        raw = {r.record_id: raw_report(m, c) for r, m, c in zip(corpus.records, corpus.metadata, corpus.codes)}
        data = AblationData((corpus.records[:24], y[:24]), (corpus.records[24:32], y[24:32]),
                            (corpus.records[32:], y[32:]), corpus.reports, raw, labels, bank)
        base = PretrainConfig(
            encoder=TINY,
            heads=HeadConfig(proj_dim=8, dino_hidden=16, dino_bottleneck=8, dino_out=16, text_buckets=256, text_dim=8),
            optim=OptimConfig(lr=1e-3, batch_size=12, epochs=1),
        )
        table = ablation_frameworks(base, data, FinetuneConfig(epochs=1, variants=("original",)))
        assert list(table) == list(FRAMEWORKS)
        assert all(list(row) == list(VARIANTS) for row in table.values())
        lines = write_table(table, tmp_path / "t.csv").read_text().splitlines()
        assert len(lines) == 6 and lines[0].count(",") == 4

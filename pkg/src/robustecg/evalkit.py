"""Downstream evaluation: metrics, corrupted test sets, fine-tuning and sweeps."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import rankdata

from .corruption import VARIANTS, CorruptionConfig, build_variant_record, apply_lead_mask, fixed_count_mask, inject_noise
from .encoder import EcgEncoder, EncoderConfig, as_batch
from .errors import ConfigError, ConfigMismatch, CorruptCheckpoint, DegenerateLabels, MissingFile, NoPositives
from .signalio import DatasetManifest, EcgRecord, NoiseBank, write_record
from .trainer import TrainState, load_checkpoint, read_tensor_dir, write_tensor_dir

log = logging.getLogger(__name__)


# metrics -------------------------------------------------------------------

def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ConfigError(f"{s.size} scores for {y.size} labels")
    return s, y


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counting one half."""
    s, y = _binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"AUROC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Mean over positives of the precision at that positive's score threshold.

    The threshold includes every example scoring at least as high, so a
    tied group is credited with the precision at the end of the group.
    """
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    # last index of each tied block gives "all examples scoring >= s"
    _, first = np.unique(-s_sorted, return_index=True)
    last = np.append(first[1:], len(s_sorted)) - 1
    block_end = np.repeat(last, np.diff(np.append(first, len(s_sorted))))
    precision = tp[block_end] / (block_end + 1)
    return float(precision[y_sorted].sum() / n_pos)


@dataclass
class MetricsReport:
    labels: list[str]
    per_label_ap: list[float | None]
    per_label_auc: list[float | None]
    n_pos: list[int]
    macro_ap: float
    macro_auc: float
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


def multilabel_metrics(scores: np.ndarray, targets: np.ndarray, labels: Sequence[str] | None = None) -> MetricsReport:
    """Per-label and macro AP/AUC; labels lacking a positive or a negative are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise ConfigError(f"scores {scores.shape} and targets {targets.shape} must be matching 2-D arrays")
    labels = list(labels) if labels is not None else [str(i) for i in range(targets.shape[1])]
    ap, auc, skipped = [], [], []
    for j, name in enumerate(labels):
        y = targets[:, j]
        if y.all() or not y.any():
            ap.append(None)
            auc.append(None)
            skipped.append(name)
            continue
        ap.append(average_precision(scores[:, j], y))
        auc.append(auroc(scores[:, j], y))
    valid_ap = [v for v in ap if v is not None]
    if not valid_ap:
        raise DegenerateLabels("no label has both positives and negatives")
    return MetricsReport(labels, ap, auc, targets.sum(axis=0).astype(int).tolist(),
                         float(np.mean(valid_ap)), float(np.mean([v for v in auc if v is not None])), skipped)


# labels --------------------------------------------------------------------

@dataclass
class LabelSet:
    level: str
    labels: list[str]
    aggregation_map: dict[str, str] = field(default_factory=dict)

    def targets(self, code_lists: Sequence[Sequence[str]]) -> tuple[np.ndarray, int]:
        """Binary target matrix plus the number of codes that mapped to nothing.

        Any code present counts as positive; codes map through
        ``aggregation_map`` first and otherwise must be labels themselves.
        """
        index = {l: i for i, l in enumerate(self.labels)}
        y = np.zeros((len(code_lists), len(self.labels)))
        dropped = 0
        for r, codes in enumerate(code_lists):
            for c in codes:
                c = self.aggregation_map.get(c, c)
                if c in index:
                    y[r, index[c]] = 1
                else:
                    dropped += 1
        return y, dropped

    @classmethod
    def from_file(cls, path: str | Path, level: str) -> "LabelSet":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if level not in doc:
            raise ConfigError(f"label file {path} has no level {level!r}; levels: {sorted(doc)}")
        d = doc[level]
        return cls(level, list(d["labels"]), dict(d.get("aggregation_map", {})))

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, level: str = "all") -> "LabelSet":
        labels = sorted({l for e in manifest for l in e.labels})
        return cls(level, labels)


# variant datasets ----------------------------------------------------------

def variant_records(
    records: Sequence[EcgRecord],
    variant: str,
    bank: NoiseBank | None,
    config: CorruptionConfig,
    seed: int,
) -> list[EcgRecord]:
    """One corrupted copy per record; record ``i`` draws from stream ``(seed, i)``."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if bank is not None and records:
        bank = bank.prepared(records[0].sample_rate_hz)
    return [build_variant_record(r, variant, bank, config, np.random.default_rng([seed, i, VARIANTS.index(variant)]))
            for i, r in enumerate(records)]


def aggregate_variants(records, targets, bank, config, seed, variants=VARIANTS):
    """All variants concatenated: ``len(variants) * len(records)`` examples."""
    xs, ys = [], []
    for v in variants:
        xs.extend(variant_records(records, v, bank, config, seed))
        ys.append(targets)
    return xs, np.concatenate(ys)


def build_variant_dataset(
    manifest: DatasetManifest,
    variant: str,
    bank: NoiseBank | None,
    config: CorruptionConfig,
    seed: int,
    out_dir: str | Path | None = None,
) -> DatasetManifest:
    """Write a corrupted copy of ``manifest`` (fixed seed) and return its manifest.

    ``variant="original"`` without ``out_dir`` returns the input unchanged.
    """
    if variant == "original" and out_dir is None:
        return manifest
    if out_dir is None:
        raise ConfigError("corrupted variants need an output directory")
    out_dir = Path(out_dir)
    records = variant_records(manifest.load_all(), variant, bank, config, seed)
    entries = [
        replace(write_record(r, out_dir, e.relative_path, e.labels, e.metadata, e.report_codes),
                lead_names=e.lead_names)
        for r, e in zip(records, manifest)
    ]
    out = DatasetManifest(entries, out_dir)
    out.save(out_dir / "manifest.json")
    return out


# fine-tuning ---------------------------------------------------------------

@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    weight_decay: float = 0.0
    variants: tuple[str, ...] = VARIANTS
    freeze_encoder: bool = False
    patience: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.variants = tuple(self.variants)
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise ConfigError(f"unknown variants {sorted(bad)}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"invalid fine-tune config {self}")


class Classifier(nn.Module):
    """ECG encoder with one affine layer on top."""

    def __init__(self, encoder: EcgEncoder, n_labels: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.embed_dim, n_labels)

    def forward(self, x):
        return self.head(self.encoder(x))


@dataclass
class FinetunedModel:
    model: Classifier
    label_set: LabelSet
    encoder_config: EncoderConfig
    history: list[dict] = field(default_factory=list)
    best_val_auc: float | None = None
    skipped: list[str] = field(default_factory=list)

    @torch.no_grad()
    def predict(self, records, batch_size: int = 64) -> np.ndarray:
        self.model.eval()
        x = as_batch(list(records))
        out = [torch.sigmoid(self.model(x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
        return torch.cat(out).numpy()

    def evaluate(self, records, targets) -> MetricsReport:
        return multilabel_metrics(self.predict(records), targets, self.label_set.labels)

    def save(self, path: str | Path) -> Path:
        return write_tensor_dir(self.model.state_dict(), path, {
            "kind": "finetuned",
            "encoder": self.encoder_config.to_dict(),
            "label_set": asdict(self.label_set),
            "best_val_auc": self.best_val_auc,
            "skipped": self.skipped,
        })

    @classmethod
    def load(cls, path: str | Path) -> "FinetunedModel":
        manifest, tensors = read_tensor_dir(path)
        if manifest.get("kind") != "finetuned":
            raise CorruptCheckpoint(f"{path} is not a fine-tuned model")
        enc_cfg = EncoderConfig(**manifest["encoder"])
        ls = LabelSet(**manifest["label_set"])
        model = Classifier(EcgEncoder(enc_cfg), len(ls.labels))
        model.load_state_dict(tensors)
        return cls(model, ls, enc_cfg, best_val_auc=manifest.get("best_val_auc"), skipped=manifest.get("skipped", []))


def resolve_encoder(source, encoder_config: EncoderConfig | None = None, seed: int = 0) -> EcgEncoder:
    """Encoder from a checkpoint path, a train state, an encoder, or random init (``None``)."""
    if source is None:
        torch.manual_seed(seed)
        return EcgEncoder(encoder_config or EncoderConfig())
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source)
    if isinstance(source, TrainState):
        enc = source.student.encoder
    elif isinstance(source, EcgEncoder):
        enc = source
    else:
        raise ConfigError(f"cannot get an encoder from {type(source).__name__}")
    if encoder_config is not None and enc.config.to_dict() != encoder_config.to_dict():
        raise ConfigMismatch(f"checkpoint encoder {enc.config} differs from requested {encoder_config}")
    return copy.deepcopy(enc)


def finetune(
    source,
    train: tuple[Sequence[EcgRecord], np.ndarray],
    val: tuple[Sequence[EcgRecord], np.ndarray],
    label_set: LabelSet,
    config: FinetuneConfig | None = None,
    bank: NoiseBank | None = None,
    corruption: CorruptionConfig | None = None,
    encoder_config: EncoderConfig | None = None,
) -> FinetunedModel:
    """Multi-label fine-tuning with per-label BCE; keeps the best validation macro-AUC.

    Training examples are the configured variants of the training records,
    redrawn every epoch; the validation set is used as given.
    """
    config = config or FinetuneConfig()
    corruption = corruption or CorruptionConfig()
    train_x, train_y = list(train[0]), np.asarray(train[1], dtype=np.float32)
    val_x, val_y = list(val[0]), np.asarray(val[1])
    if any(v != "original" for v in config.variants) and bank is None:
        if any(v in ("noisy", "lead_missing_noisy") for v in config.variants):
            raise ConfigError("noisy fine-tuning variants need a noise bank")

    encoder = resolve_encoder(source, encoder_config, config.seed)
    torch.manual_seed(config.seed)
    model = Classifier(encoder, len(label_set.labels))
    if config.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)

    pos = train_y.sum(axis=0)
    active = torch.from_numpy(pos > 0)
    skipped = [l for l, a in zip(label_set.labels, active.tolist()) if not a]
    result = FinetunedModel(model, label_set, encoder.config, skipped=skipped)
    best_state, best_auc, stale = None, -np.inf, 0
    for epoch in range(config.epochs):
        xs, ys = aggregate_variants(train_x, train_y, bank, corruption,
                                    seed=config.seed * 1000 + epoch, variants=config.variants)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(xs))
        model.train()
        if config.freeze_encoder:
            model.encoder.eval()
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            x = as_batch([xs[j] for j in idx])
            y = torch.from_numpy(ys[idx])
            logits = model(x)
            loss = F.binary_cross_entropy_with_logits(logits[:, active], y[:, active])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_auc = result.evaluate(val_x, val_y).macro_auc if len(val_x) else float("nan")
        result.history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_macro_auc": val_auc})
        log.info("finetune epoch %d loss %.4f val auc %.4f", epoch, np.mean(losses), val_auc)
        if val_auc > best_auc:
            best_auc, stale = val_auc, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
        result.best_val_auc = float(best_auc)
    return result


# sweeps --------------------------------------------------------------------

@dataclass
class SweepTable:
    axis: str
    points: list[float]
    macro_auc: list[float]

    def rows(self):
        return list(zip(self.points, self.macro_auc))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([self.axis, "macro_auc"])
            w.writerows(self.rows())
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "SweepTable":
        if not Path(path).is_file():
            raise MissingFile(f"sweep table not found: {path}")
        with Path(path).open(encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        return cls(rows[0][0], [float(r[0]) for r in rows[1:]], [float(r[1]) for r in rows[1:]])

    def plot_data(self) -> dict:
        titles = {"lead_count": "AUC vs number of leads", "snr_db": "AUC vs SNR (dB)"}
        return {"title": titles.get(self.axis, self.axis), "x_label": self.axis, "y_label": "macro AUC",
                "series": [{"name": "model", "x": self.points, "y": self.macro_auc}]}


def corrupt_for_sweep(
    records: Sequence[EcgRecord],
    axis: str,
    point: float,
    bank: NoiseBank | None,
    seed: int,
) -> list[EcgRecord]:
    """Keep exactly ``point`` leads, or add all three noise types to every lead at ``point`` dB."""
    out = []
    if axis == "lead_count":
        k = int(point)
        for i, r in enumerate(records):
            if k == r.num_leads:
                out.append(r)
            else:
                out.append(apply_lead_mask(r, fixed_count_mask(r.num_leads, k, np.random.default_rng([seed, i, k]))))
    elif axis == "snr_db":
        if bank is None:
            raise ConfigError("the SNR sweep needs a noise bank")
        bank = bank.prepared(records[0].sample_rate_hz)
        cfg = CorruptionConfig()
        for i, r in enumerate(records):
            rng = np.random.default_rng([seed, i, 7])
            out.append(inject_noise(r, bank, cfg, rng, snr_db=float(point), per_lead_p=1.0, per_type_p=1.0))
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    return out


def ablation_sweep(
    model: FinetunedModel,
    records: Sequence[EcgRecord],
    targets: np.ndarray,
    axis: str,
    points: Sequence[float],
    bank: NoiseBank | None = None,
    seed: int = 0,
) -> SweepTable:
    if axis == "lead_count":
        n = records[0].num_leads
        bad = [p for p in points if not 1 <= int(p) <= n]
        if bad:
            raise ConfigError(f"lead counts must lie in 1..{n}, got {bad}")
    aucs = [model.evaluate(corrupt_for_sweep(records, axis, p, bank, seed), targets).macro_auc for p in points]
    return SweepTable(axis, [float(p) for p in points], aucs)


# framework ablation --------------------------------------------------------

FRAMEWORKS = {
    "reportalign_raw": {"weights": {"alpha": 1.0, "beta": 0.0}, "report_source": "raw"},
    "reportalign_cfr": {"weights": {"alpha": 1.0, "beta": 0.0}, "report_source": "cfr"},
    "unidistill": {"weights": {"alpha": 0.0, "beta": 1.0}, "single_teacher": True},
    "duodistill": {"weights": {"alpha": 0.0, "beta": 1.0}},
    "full": {"weights": {"alpha": 1.0, "beta": 1.0}},
}


def framework_config(base, name: str):
    """A copy of ``base`` (a :class:`PretrainConfig`) with the framework's toggles applied."""
    from .trainer import PretrainConfig

    if name not in FRAMEWORKS:
        raise ConfigError(f"unknown framework {name!r}; expected one of {sorted(FRAMEWORKS)}")
    flags = FRAMEWORKS[name]
    d = base.to_dict()
    d["weights"] = dict(flags["weights"])
    d["single_teacher"] = bool(flags.get("single_teacher", False))
    d["data"] = {**d["data"], "report_source": flags.get("report_source", "cfr")}
    return PretrainConfig.from_dict(d)


@dataclass
class AblationData:
    train: tuple[list[EcgRecord], np.ndarray]
    val: tuple[list[EcgRecord], np.ndarray]
    test: tuple[list[EcgRecord], np.ndarray]
    reports: Mapping[str, str]
    raw_reports: Mapping[str, str]
    label_set: LabelSet
    bank: NoiseBank


def ablation_frameworks(
    base,
    data: AblationData,
    finetune_config: FinetuneConfig | None = None,
    frameworks: Sequence[str] = tuple(FRAMEWORKS),
    seed: int = 0,
) -> dict[str, dict[str, float]]:
    """Pretrain each framework variant, fine-tune it and score the four test variants.

    Returns ``{framework: {variant: macro_auc}}``.
    """
    from .trainer import pretrain

    table = {}
    test_x, test_y = data.test
    test_sets = {v: variant_records(test_x, v, data.bank, base.corruption, seed) for v in VARIANTS}
    for name in frameworks:
        cfg = framework_config(base, name)
        reports = data.raw_reports if cfg.data["report_source"] == "raw" else data.reports
        ckpt = pretrain(cfg, data.train[0], data.bank, reports)
        model = finetune(ckpt.state, data.train, data.val, data.label_set, finetune_config,
                         data.bank, base.corruption)
        table[name] = {v: model.evaluate(xs, test_y).macro_auc for v, xs in test_sets.items()}
    return table


def write_table(table: Mapping[str, Mapping[str, float]], path: str | Path) -> Path:
    path = Path(path)
    cols = list(VARIANTS)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["framework", *cols])
        for name, row in table.items():
            w.writerow([name, *(row[c] for c in cols)])
    return path

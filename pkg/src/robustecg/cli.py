"""Command-line entry points: build-reports, pretrain, finetune, eval, ablate, plot-data."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cfr
from .corruption import VARIANTS, CorruptionConfig
from .errors import ConfigError, RobustEcgError
from .evalkit import (
    FinetuneConfig,
    FinetunedModel,
    LabelSet,
    SweepTable,
    ablation_sweep,
    finetune,
    variant_records,
)
from .signalio import read_manifest, read_noise_bank
from .trainer import PretrainConfig, pretrain

log = logging.getLogger("robustecg")


def _bank(path):
    return read_noise_bank(path) if path else None


def _targets(manifest, label_set: LabelSet) -> np.ndarray:
    y, dropped = label_set.targets([e.labels for e in manifest])
    if dropped:
        log.warning("%d record labels are not in the label set and were ignored", dropped)
    return y


def _label_set(args, manifest) -> LabelSet:
    if args.labels:
        return LabelSet.from_file(args.labels, args.level)
    return LabelSet.from_manifest(manifest, args.level)


def cmd_build_reports(args):
    manifest = read_manifest(args.manifest)
    entries = cfr.read_diagnoses(args.diagnoses) if args.diagnoses else cfr.bundled_diagnoses()
    table = cfr.read_abbreviations(args.abbrev) if args.abbrev else cfr.DEFAULT_ABBREVIATIONS
    embedder = cfr.HashingEmbedder()
    db = cfr.build_diagnosis_db(entries, embedder)
    config = cfr.RetrievalConfig(args.threshold)
    cfr.write_reports(cfr.build_reports(manifest, table, db, embedder, config), args.out)
    log.info("wrote %d reports to %s", len(manifest), args.out)


def cmd_pretrain(args):
    config = PretrainConfig.load(args.config)
    data = config.data
    if "manifest" not in data:
        raise ConfigError("config.data.manifest is required")
    base = Path(args.config).parent
    def resolve(p):
        return p if Path(p).is_absolute() else base / p

    records = read_manifest(resolve(data["manifest"])).load_all()
    reports = cfr.read_reports(resolve(data["reports"])) if data.get("reports") else None
    bank = read_noise_bank(resolve(data["noise"])) if data.get("noise") else None
    ck = pretrain(config, records, bank, reports, out_dir=args.out,
                  checkpoint_every=args.checkpoint_every, resume_from=args.resume)
    last = ck.metrics[-1] if ck.metrics else None
    log.info("finished at step %d%s", ck.state.step, f", total loss {last.l_total:.4f}" if last else "")


def cmd_finetune(args):
    manifest = read_manifest(args.manifest)
    label_set = _label_set(args, manifest)
    records = manifest.load_all()
    y = _targets(manifest, label_set)
    if args.val_manifest:
        val_m = read_manifest(args.val_manifest)
        val = (val_m.load_all(), _targets(val_m, label_set))
        train = (records, y)
    else:
        # deterministic 80/20 hold-out
        order = np.random.default_rng([args.seed, 0x5A1]).permutation(len(records))
        cut = max(1, int(round(0.8 * len(records))))
        tr, va = order[:cut], order[cut:]
        train = ([records[i] for i in tr], y[tr])
        val = ([records[i] for i in va], y[va])
    variants = tuple(args.variants.split(",")) if args.variants else VARIANTS
    config = FinetuneConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                            variants=variants, freeze_encoder=args.freeze_encoder, seed=args.seed)
    source = None if args.checkpoint == "random" else args.checkpoint
    model = finetune(source, train, val, label_set, config, _bank(args.noise))
    out = Path(args.out)
    model.save(out / "model")
    (out / "history.json").write_text(json.dumps(model.history, indent=1), encoding="utf-8")
    log.info("best validation macro-AUC %.4f", model.best_val_auc)


def cmd_eval(args):
    model = FinetunedModel.load(args.model)
    manifest = read_manifest(args.manifest)
    records = variant_records(manifest.load_all(), args.variant, _bank(args.noise), CorruptionConfig(), args.seed)
    report = model.evaluate(records, _targets(manifest, model.label_set))
    report.save(args.out)
    log.info("%s: macro-AUC %.4f macro-AP %.4f", args.variant, report.macro_auc, report.macro_ap)


def cmd_ablate(args):
    model = FinetunedModel.load(args.model)
    manifest = read_manifest(args.manifest)
    table = ablation_sweep(model, manifest.load_all(), _targets(manifest, model.label_set),
                           args.axis, args.points, _bank(args.noise), args.seed)
    table.to_csv(args.out)
    for p, a in table.rows():
        log.info("%s=%g macro-AUC %.4f", args.axis, p, a)


def cmd_plot_data(args):
    data = SweepTable.from_csv(args.sweep).plot_data()
    Path(args.out).write_text(json.dumps(data, indent=1), encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustecg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-reports", help="compose report text for every record in a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--diagnoses", help="JSONL of {key, criteria}; defaults to the bundled table")
    s.add_argument("--abbrev", help="JSON code->phrase table; defaults to the built-in one")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_reports)

    s = sub.add_parser("pretrain", help="alternating two-teacher pretraining")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="train a linear head (and optionally the encoder)")
    s.add_argument("--checkpoint", required=True, help="pretraining checkpoint dir, or 'random'")
    s.add_argument("--manifest", required=True)
    s.add_argument("--val-manifest")
    s.add_argument("--labels")
    s.add_argument("--level", default="all")
    s.add_argument("--noise")
    s.add_argument("--variants", help="comma-separated subset of " + ",".join(VARIANTS))
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--freeze-encoder", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="macro AP/AUC on one corruption variant")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--variant", choices=VARIANTS, default="original")
    s.add_argument("--noise")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="sweep lead count or SNR")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--axis", choices=("lead_count", "snr_db"), required=True)
    s.add_argument("--points", type=float, nargs="+", required=True)
    s.add_argument("--noise")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("plot-data", help="turn a sweep CSV into plot-ready JSON")
    s.add_argument("--sweep", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except RobustEcgError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Fine-tune a linear head on a briefly pretrained encoder, then sweep lead count and SNR."""

import numpy as np

from robustecg.corruption import CorruptionConfig
from robustecg.evalkit import FinetuneConfig, LabelSet, ablation_sweep, finetune, variant_records
from robustecg.synthetic import CLASS_LABELS, SyntheticSpec, make_corpus, make_noise_bank, smoke_pretrain_config
from robustecg.trainer import pretrain

train = make_corpus(SyntheticSpec(n_records=128, seed=0))
held = make_corpus(SyntheticSpec(n_records=96, seed=1))
bank = make_noise_bank()

ck = pretrain(smoke_pretrain_config(epochs=2), train.records, bank, train.reports)
print("pretrained for", ck.state.step, "steps")

labels = LabelSet("all", list(CLASS_LABELS))
y = held.label_matrix()
val, test = (held.records[:32], y[:32]), (held.records[32:], y[32:])
model = finetune(ck.state, (train.records, train.label_matrix()), val, labels,
                 FinetuneConfig(lr=1e-3, epochs=4), bank)
for h in model.history:
    print(f"epoch {h['epoch']}  loss {h['loss']:.4f}  val macro-AUC {h['val_macro_auc']:.4f}")

for variant in ("original", "lead_missing", "noisy", "lead_missing_noisy"):
    recs = variant_records(test[0], variant, bank, CorruptionConfig(), seed=0)
    r = model.evaluate(recs, test[1])
    print(f"{variant:20} AUC {r.macro_auc:.3f}  AP {r.macro_ap:.3f}")

leads = ablation_sweep(model, *test, "lead_count", [1, 4, 8, 12])
snr = ablation_sweep(model, *test, "snr_db", [-10, 0, 40], bank)
print("lead sweep:", [(int(p), round(a, 3)) for p, a in leads.rows()])
print("snr sweep: ", [(p, round(a, 3)) for p, a in snr.rows()])
print("plot data keys:", sorted(leads.plot_data()))

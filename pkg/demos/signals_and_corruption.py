"""Walk through record handling and the two corruption families on one synthetic ECG."""

import numpy as np

from robustecg.corruption import CorruptionConfig, apply_lead_mask, build_views, draw_noise, sample_lead_mask
from robustecg.signalio import band_filter, resample, signal_power
from robustecg.synthetic import SyntheticSpec, make_corpus, make_noise_bank

corpus = make_corpus(SyntheticSpec(n_records=4, seed=3))
rec = corpus.records[0]
print(rec.record_id, rec.samples.shape, rec.sample_rate_hz, "Hz", rec.lead_names[:3], "...")

# up to 500 Hz and back down is close to lossless for a band-limited signal
up = resample(rec, 500)
back = resample(up, 100)
print("resample 100 -> 500 -> 100, max abs diff:", float(np.abs(back.samples - rec.samples).max()))

clean = band_filter(rec)
print("band filter 0.5-47 Hz, lead II power before/after:",
      round(signal_power(rec.samples[1]), 4), round(signal_power(clean.samples[1]), 4))

rng = np.random.default_rng(0)
for level in ("major", "minor"):
    mask = sample_lead_mask(level, 12, rng)
    kept = [rec.lead_names[i] for i in np.flatnonzero(mask.keep)]
    print(f"{level} mask keeps {mask.count:2d}:", " ".join(kept))
print("masked leads are zeroed:", apply_lead_mask(rec, mask).samples[~mask.keep].any() == False)

bank = make_noise_bank().prepared(rec.sample_rate_hz)
cfg = CorruptionConfig()
for target in (-10.0, -5.0, 0.0):
    noisy, draw = draw_noise(rec, bank, cfg, rng, snr_db=target, per_lead_p=1.0, per_type_p=1.0)
    lead = draw.leads[0]
    added = noisy.samples[lead].astype(np.float64) - rec.samples[lead]
    measured = 10 * np.log10(signal_power(rec.samples[lead]) / signal_power(added))
    print(f"target {target:6.1f} dB, measured on {rec.lead_names[lead]}: {measured:6.2f} dB, types {draw.types}")

for mode in ("mask", "noise"):
    views = build_views(rec, mode, bank, cfg, rng)
    print(mode, "views:", len(views.minor_views), "minor +", len(views.major_views), "major ->", views.stacked().shape)

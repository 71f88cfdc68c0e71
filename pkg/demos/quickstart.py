"""Small end-to-end run through the library API (about two minutes on one core).

corpus -> codec -> dictionary -> guided consistency training -> NFE 1/2/4
sampling -> metrics, next to the held-out real data and a many-step baseline.
"""

import sys
import time

from mlct.codec import latent
from mlct.pipeline import (
    RunConfig,
    evaluate_samples,
    fit_baseline,
    fit_codec,
    generate_baseline,
    generate_consistency,
    prepare_data,
    run_consistency,
)

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
cfg = RunConfig(classes=2, items_per_class=100, codec_width=64, codec_steps=800, width=96, blocks=4,
                lr=1e-3, gamma=0.99, huber_c=0.3, steps=steps, samples_per_class=200,
                baseline_steps=2000, baseline_lr=1e-3)

t0 = time.time()
data = prepare_data(cfg)
print(f"corpus: {len(data.train)} train / {len(data.holdout)} held-out sequences")
codec = fit_codec(cfg, data)
print(f"codec trained ({time.time() - t0:.0f}s)")

run = run_consistency(cfg, data, codec, nfes=())
print(f"consistency model trained ({time.time() - t0:.0f}s)")
for nfe in (1, 2, 4):
    labels, seqs, res = generate_consistency(cfg, data, run.trainer.target, codec, run.dictionary, nfe, cfg.seed)
    m = evaluate_samples(cfg, data, labels, seqs)
    print(f"NFE {res.nfe}: frechet {m['frechet']:.4f}  accuracy {m['accuracy']:.3f}")

base = fit_baseline(cfg, data, latent(codec, data.train.items))
labels, seqs = generate_baseline(cfg, data, base, codec, cfg.seed)
m = evaluate_samples(cfg, data, labels, seqs)
print(f"baseline, {cfg.oracle_steps} Euler steps: frechet {m['frechet']:.4f}  accuracy {m['accuracy']:.3f}")
print(f"total {time.time() - t0:.0f}s")

"""
Ablation switches on one fold
=============================

The training config exposes the moving parts of the architecture as
flags, so the contribution of each piece can be measured. Three runs
on the same fold of the same cohort:

  full          the complete model: genomic reconstruction during
                training, fused attention at inference
  cut_bridge    reconstruction still trains, but the survival branch
                ignores the association attention entirely
  gated_baseline  plain gated-attention pooling, hazard loss only,
                no genomics anywhere
"""

import tempfile
from pathlib import Path

from histodistill.checkpoint import load_checkpoint
from histodistill.datasets import SynthConfig, discretize_survival, make_folds, synth_generate
from histodistill.training import TrainConfig, run_fold

synth = SynthConfig(n_patients=80, patch_range=(8, 24), feature_dim=16,
                    n_prototypes=4, gene_counts=(4, 6, 8, 6, 10, 4))
cohort, _ = synth_generate(synth, seed=3)

base = dict(seed=0, epochs=14, width=32, heads=2, compress_width=16,
            n_bins=3, n_folds=3, accumulation=16, k_percent=20.0)

variants = {
    "full": TrainConfig(**base),
    "cut_bridge": TrainConfig(**base, cut_bridge=True),
    "gated_baseline": TrainConfig(**base, gated_baseline=True),
}

config = variants["full"]
boundaries, bins = discretize_survival(cohort.times(), cohort.censor_flags(),
                                       config.n_bins)
train_idx, val_idx = make_folds(cohort, config.seed, config.n_folds)[0]

print(f"{'variant':16s} {'c-index':>8s} {'log-rank p':>11s}  params trained")
for name, cfg in variants.items():
    out = Path(tempfile.mkdtemp(prefix=f"ablate_{name}_"))
    run = run_fold(cohort, train_idx, val_idx, cfg, boundaries, bins, 0, out)
    ckpt = load_checkpoint(run.checkpoint_path)
    n_params = sum(t.values.size for _, t in ckpt.model.named_tensors())
    print(f"{name:16s} {run.result.c_index:8.3f} {run.result.logrank_p:11.2e}  {n_params}")

# The gap between full and gated_baseline is what the genomic side buys;
# the gap between full and cut_bridge isolates the fused-attention path
# specifically (cut_bridge keeps the reconstruction loss as a regularizer
# but severs its attention from the survival head). A single 27-patient
# fold is a noisy measurement, so treat these numbers as illustrative;
# the test suite measures the same gap over a full 5-fold run on 200
# patients, where it holds with margin.

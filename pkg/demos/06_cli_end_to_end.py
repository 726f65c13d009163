"""
The command line, exercised as a pipeline
=========================================

Everything the library does is reachable through `histodistill <command>`.
This script drives the console entry point in-process, the same argv a
shell user would type, building a small study from scratch: generate a
cohort, inspect gene selection, cross-validate, evaluate one checkpoint
image-only, export association matrices, and sweep the masking rate.
"""

import json
import tempfile
from pathlib import Path

from histodistill.cli import main

root = Path(tempfile.mkdtemp(prefix="cli_demo_"))
data = root / "data"

config = root / "config.json"
config.write_text(json.dumps({
    "synth": {"n_patients": 40, "patch_range": [6, 16], "feature_dim": 12,
              "n_prototypes": 3, "gene_counts": [3, 4, 6, 4, 8, 3]},
    "train": {"epochs": 4, "width": 16, "heads": 2, "compress_width": 8,
              "n_bins": 3, "n_folds": 2, "accumulation": 8, "seed": 0},
}, indent=2))


def run(*argv):
    print(f"\n$ histodistill {' '.join(argv)}")
    code = main(list(argv))
    assert code == 0, f"exit code {code}"


# ---------------------------------------------------------------------------

run("synth", "--config", str(config), "--out-dir", str(data))
manifest = data / "synthetic_manifest.json"
print("wrote:", sorted(p.name for p in data.iterdir()))

run("select-genes", "--config", str(config), "--manifest", str(manifest),
    "--out-dir", str(root / "selection"))
head = (root / "selection" / "selection.tsv").read_text().splitlines()
print("selection.tsv, first rows:")
for line in head[:4]:
    print(" ", line)

# full cross-validation writes fold checkpoints plus pooled metrics
run("cross-validate", "--config", str(config), "--manifest", str(manifest),
    "--out-dir", str(root / "cv"))
metrics = json.loads((root / "cv" / "metrics.json").read_text())
print("fold c-indices:", [round(f["c_index"], 3) for f in metrics["folds"]])
print("mean c-index:", round(metrics["c_index_mean"], 3))
print("pooled log-rank p:", f'{metrics["pooled_logrank_p"]:.2e}')

# ---------------------------------------------------------------------------
# masking-rate sweep (trains, so it runs while genomics are still on disk)
# ---------------------------------------------------------------------------

run("sweep-k", "--config", str(config), "--manifest", str(manifest),
    "--grid", "10,30,50", "--out-dir", str(root / "sweep"))
print((root / "sweep" / "sweep_k.tsv").read_text().strip())

# ---------------------------------------------------------------------------
# a trained checkpoint needs no genomic files at inference time
# ---------------------------------------------------------------------------

ckpt = root / "cv" / "fold0.ghck"
(data / "synthetic_genomics.tsv").unlink()
(data / "synthetic_gene_categories.tsv").unlink()
print("\ngenomic TSVs deleted; evaluation still runs:")

run("eval", "--checkpoint", str(ckpt), "--manifest", str(manifest),
    "--out-dir", str(root / "eval"))
print((root / "eval" / "eval_metrics.json").read_text().strip())

run("km", "--checkpoint", str(ckpt), "--manifest", str(manifest),
    "--out-dir", str(root / "km"))
km_lines = (root / "km" / "km.tsv").read_text().splitlines()
print(f"km.tsv: {len(km_lines) - 1} rows, header: {km_lines[0]}")

# per-category patch attention for one bag, before and after masking
run("export-assoc", "--checkpoint", str(ckpt),
    "--bag", str(data / "bags" / "synthetic_0000.bag"),
    "--out-dir", str(root / "assoc"))
print("exports:", sorted(p.name for p in (root / "assoc").iterdir()))

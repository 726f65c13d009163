"""Training loop, cross-validation, and the analysis exports.

Training runs one patient at a time (bags have ragged patch counts) and
accumulates gradients over groups of patients before each Adam step, each
patient's loss scaled by the group size so a step sees the group mean.
Validation metrics are always computed from the saved checkpoint after
reloading it, so `eval` on the same file reproduces them exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import stats
from .autodiff import GraphError
from .checkpoint import CheckpointData, load_checkpoint, save_checkpoint
from .datasets import Cohort, discretize_survival, make_folds
from .errors import ConfigError, TrainingError
from .geneselect import (GeneSelection, differential_select, split_risk_groups,
                         write_selection_report)
from .model import (ModelConfig, ModelParams, build_model, model_forward,
                    nll_loss, predict, reconstruction_loss, topk_masked_softmax,
                    total_loss)

SWEEP_K_GRID = (10, 15, 20, 25, 30, 35)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 20
    batch_size: int = 1
    accumulation: int = 32
    alpha: float = 0.3
    k_percent: float = 20.0
    gamma: float = 2.0
    n_bins: int = 4
    width: int = 64
    heads: int = 2
    compress_width: int = 32
    seed: int = 0
    n_folds: int = 5
    gene_selection: bool = True
    select_alpha: float = 0.05
    min_genes_per_category: int = 1
    score_head: int | None = None
    gated_baseline: bool = False
    gated_recon: bool = False
    cut_bridge: bool = False
    assoc_only: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.accumulation < 1:
            raise ConfigError("lr, epochs, and accumulation must be positive")
        if self.batch_size != 1:
            raise ConfigError("only batch_size 1 is supported (bags are ragged); "
                              "use accumulation for larger effective batches")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be at least 2")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self, feature_dim: int,
                     category_sizes: tuple[int, ...]) -> ModelConfig:
        return ModelConfig(
            feature_dim=feature_dim,
            category_sizes=category_sizes,
            width=self.width,
            heads=self.heads,
            compress_width=self.compress_width,
            n_bins=self.n_bins,
            k_percent=self.k_percent,
            gamma=self.gamma,
            score_head=self.score_head,
            gated_recon=self.gated_recon,
            cut_bridge=self.cut_bridge,
            assoc_only=self.assoc_only,
            gated_baseline=self.gated_baseline,
        )


class Adam:
    """Standard Adam with bias correction; state lives per parameter."""

    def __init__(self, params: Sequence[ad.Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        ad.zero_grads(self.params)

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            m_hat = m / correction1
            v_hat = v / correction2
            p.assign_(p.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


# ---------------------------------------------------------------------------
# gene targets
# ---------------------------------------------------------------------------

@dataclass
class GeneStandardizer:
    """Per-gene z-scoring frozen from the training split."""
    means: tuple[np.ndarray, ...]
    stds: tuple[np.ndarray, ...]

    @classmethod
    def fit(cls, expression: Sequence[np.ndarray]) -> "GeneStandardizer":
        """`expression` holds (n_genes, n_train_patients) per category."""
        means, stds = [], []
        for matrix in expression:
            matrix = np.asarray(matrix, dtype=np.float64)
            means.append(matrix.mean(axis=1))
            stds.append(np.maximum(matrix.std(axis=1), 1e-8))
        return cls(tuple(means), tuple(stds))

    def transform(self, vectors: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [(np.asarray(v) - m) / s
                for v, m, s in zip(vectors, self.means, self.stds)]

    def inverse(self, vectors: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [np.asarray(v) * s + m
                for v, m, s in zip(vectors, self.means, self.stds)]

    def to_dict(self) -> dict:
        return {"mean": [m.tolist() for m in self.means],
                "std": [s.tolist() for s in self.stds]}

    @classmethod
    def from_dict(cls, raw: dict) -> "GeneStandardizer":
        return cls(tuple(np.asarray(m, dtype=np.float64) for m in raw["mean"]),
                   tuple(np.asarray(s, dtype=np.float64) for s in raw["std"]))


def expression_matrices(cohort: Cohort, indices: np.ndarray) -> list[np.ndarray]:
    """Per-category (n_genes, n_patients) matrices over the given patients."""
    sizes = cohort.category_sizes
    if sizes is None:
        raise ConfigError("cohort carries no genomic profiles")
    return [np.stack([cohort[i].genes.vectors[c] for i in indices], axis=1)
            for c in range(len(sizes))]


def select_genes(cohort: Cohort, train_idx: np.ndarray,
                 config: TrainConfig) -> GeneSelection | None:
    """Differential selection on the training split; None when bypassed."""
    if not config.gene_selection or cohort.category_sizes is None:
        return None
    times = cohort.times()[train_idx]
    censor = cohort.censor_flags()[train_idx]
    groups = split_risk_groups(times, censor)
    return differential_select(expression_matrices(cohort, train_idx), groups,
                               alpha=config.select_alpha,
                               min_per_category=config.min_genes_per_category)


def _selected_expression(cohort: Cohort, indices: np.ndarray,
                         selection: GeneSelection | None) -> list[np.ndarray]:
    matrices = expression_matrices(cohort, indices)
    if selection is None:
        return matrices
    return [m[sel.retained] for m, sel in zip(matrices, selection.categories)]


def _selected_vectors(profile_vectors: Sequence[np.ndarray],
                      selection: GeneSelection | None) -> list[np.ndarray]:
    if selection is None:
        return [np.asarray(v) for v in profile_vectors]
    return [np.asarray(v)[sel.retained]
            for v, sel in zip(profile_vectors, selection.categories)]


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def train_model(model: ModelParams, cohort: Cohort, train_idx: np.ndarray,
                bins: np.ndarray, config: TrainConfig,
                standardizer: GeneStandardizer | None,
                selection: GeneSelection | None,
                shuffle_rng: np.random.Generator) -> list[dict]:
    """Optimizes `model` in place; returns the per-epoch loss trace."""
    needs_genes = not config.gated_baseline
    entries = []
    for i in train_idx:
        patient = cohort[int(i)]
        targets = None
        if needs_genes:
            if patient.genes is None:
                raise ConfigError(f"patient '{patient.patient_id}' has no "
                                  f"genomics; the full model trains on it")
            raw = _selected_vectors(patient.genes.vectors, selection)
            targets = standardizer.transform(raw)
        entries.append({
            "pid": patient.patient_id,
            "bag": patient.bag.features,
            "y": int(bins[int(i)]),
            "c": int(patient.label.censor),
            "targets": targets,
        })

    optimizer = Adam(model.tensors(), lr=config.lr)
    trace = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(entries))
        sums = {"total": 0.0, "nll": 0.0, "recon": 0.0}
        for start in range(0, len(order), config.accumulation):
            group = order[start:start + config.accumulation]
            optimizer.zero_grad()
            scale = 1.0 / len(group)
            for j in group:
                entry = entries[int(j)]
                try:
                    result = model_forward(model, entry["bag"])
                    nll = nll_loss(result.hazards, entry["y"], entry["c"])
                    recon = None
                    if entry["targets"] is not None:
                        recon = reconstruction_loss(result.recon, entry["targets"],
                                                    gamma=config.gamma)
                    loss = total_loss(nll, recon, alpha=config.alpha)
                    ad.backward(ad.mul(loss, scale))
                except (ValueError, GraphError) as err:
                    raise TrainingError(
                        f"epoch {epoch + 1}, patient '{entry['pid']}': "
                        f"{err}") from err
                sums["total"] += loss.item()
                sums["nll"] += nll.item()
                sums["recon"] += recon.item() if recon is not None else 0.0
            optimizer.step()
        trace.append({
            "epoch": epoch + 1,
            "total": sums["total"] / len(entries),
            "nll": sums["nll"] / len(entries),
            "recon": sums["recon"] / len(entries),
        })
    return trace


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    c_index: float
    logrank_stat: float
    logrank_p: float
    n_patients: int
    risks: np.ndarray
    s_mid: np.ndarray
    high_group: np.ndarray
    low_group: np.ndarray
    spearman: stats.SpearmanReport | None = None

    def to_dict(self) -> dict:
        out = {
            "c_index": self.c_index,
            "logrank_stat": self.logrank_stat,
            "logrank_p": self.logrank_p,
            "n_patients": self.n_patients,
        }
        if self.spearman is not None:
            out["spearman_mean"] = {
                name: float(m) for name, m in
                zip(self.spearman.category_names, self.spearman.means())}
        return out


def evaluate(ckpt: CheckpointData, cohort: Cohort,
             indices: np.ndarray | None = None,
             with_spearman: bool = False) -> EvalResult:
    """Image-only scoring of a cohort slice against its outcomes.

    Genomic profiles are touched only when `with_spearman` asks for the
    reconstruction report (and must then be present in the cohort).
    """
    if indices is None:
        indices = np.arange(len(cohort))
    indices = np.asarray(indices, dtype=np.int64)
    model = ckpt.model
    mid = model.config.n_bins // 2
    risks = np.empty(indices.size)
    s_mid = np.empty(indices.size)
    for pos, i in enumerate(indices):
        out = predict(model, cohort[int(i)].bag.features)
        risks[pos] = out.risk
        s_mid[pos] = out.survival[mid]
    times = cohort.times()[indices]
    censor = cohort.censor_flags()[indices]
    ci = stats.c_index(risks, times, censor)
    high, low = stats.split_by_median_risk(s_mid)
    stat, p = stats.log_rank(times[high], censor[high], times[low], censor[low])

    report = None
    if with_spearman:
        report = spearman_report(ckpt, cohort, indices)
    return EvalResult(ci, stat, p, int(indices.size), risks, s_mid, high, low,
                      report)


def predict_gene_profiles(ckpt: CheckpointData,
                          bag_features: np.ndarray) -> list[np.ndarray]:
    """Reconstructed per-category gene vectors on the raw expression scale."""
    model = ckpt.model
    if model.config.gated_baseline:
        raise ConfigError("a baseline checkpoint has no reconstruction heads")
    with ad.no_grad():
        result = model_forward(model, bag_features)
    standardized = [r.values.reshape(-1) for r in result.recon]
    if ckpt.standardization is None:
        return standardized
    scaler = GeneStandardizer.from_dict(ckpt.standardization)
    return scaler.inverse(standardized)


def spearman_report(ckpt: CheckpointData, cohort: Cohort,
                    indices: np.ndarray) -> stats.SpearmanReport:
    if cohort.category_sizes is None:
        raise ConfigError("spearman report needs genomic profiles in the cohort")
    if ckpt.selected_genes is None:
        selected = [np.arange(n) for n in cohort.category_sizes]
    else:
        selected = [np.asarray(s, dtype=np.int64) for s in ckpt.selected_genes]
    predicted, actual = [], []
    for i in indices:
        patient = cohort[int(i)]
        predicted.append(predict_gene_profiles(ckpt, patient.bag.features))
        actual.append([patient.genes.vectors[c][sel]
                       for c, sel in enumerate(selected)])
    names = ckpt.category_names or list(cohort.category_names)
    return stats.spearman_report(predicted, actual, names)


# ---------------------------------------------------------------------------
# fold orchestration
# ---------------------------------------------------------------------------

def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


@dataclass
class FoldRun:
    fold: int
    checkpoint_path: Path
    result: EvalResult
    trace: list[dict]
    retained_sizes: tuple[int, ...] | None
    val_idx: np.ndarray


def run_fold(cohort: Cohort, train_idx: np.ndarray, val_idx: np.ndarray,
             config: TrainConfig, boundaries: np.ndarray, bins: np.ndarray,
             fold: int, out_dir: Path) -> FoldRun:
    """Select genes, train, checkpoint, and score one fold."""
    needs_genes = not config.gated_baseline
    if needs_genes and cohort.category_sizes is None:
        raise ConfigError("the full model trains with genomics; this cohort has "
                          "none (set gated_baseline for image-only training)")

    selection = None
    standardizer = None
    selected_idx = None
    selected_ids = None
    category_names = list(cohort.category_names or ())
    category_sizes: tuple[int, ...] = ()
    if needs_genes:
        selection = select_genes(cohort, train_idx, config)
        train_expr = _selected_expression(cohort, train_idx, selection)
        standardizer = GeneStandardizer.fit(train_expr)
        category_sizes = tuple(m.shape[0] for m in train_expr)
        if selection is not None:
            selected_idx = [sel.retained.tolist() for sel in selection.categories]
            if cohort.gene_ids is not None:
                selected_ids = [
                    [ids[g] for g in sel.retained]
                    for ids, sel in zip(cohort.gene_ids, selection.categories)]
            if cohort.gene_ids is not None:
                write_selection_report(out_dir / f"fold{fold}_selection.tsv",
                                       selection, cohort.gene_ids, category_names)
        else:
            selected_idx = [list(range(n)) for n in category_sizes]
            if cohort.gene_ids is not None:
                selected_ids = [list(ids) for ids in cohort.gene_ids]

    seed = fold_seed(config.seed, fold)
    model = build_model(config.model_config(cohort.feature_dim, category_sizes),
                        seed=seed)
    shuffle_rng = np.random.default_rng(seed + 1)
    trace = train_model(model, cohort, train_idx, bins, config, standardizer,
                        selection, shuffle_rng)

    ckpt_path = out_dir / f"fold{fold}.ghck"
    save_checkpoint(
        ckpt_path, model, boundaries,
        standardization=standardizer.to_dict() if standardizer else None,
        selected_genes=selected_idx,
        category_names=category_names,
        gene_ids=selected_ids,
        train_config=config.to_dict(),
    )
    reloaded = load_checkpoint(ckpt_path)
    result = evaluate(reloaded, cohort, val_idx)
    trace_path = out_dir / f"fold{fold}_trace.json"
    write_json(trace_path, trace)
    return FoldRun(fold, ckpt_path, result, trace,
                   selection.retained_sizes() if selection else None, val_idx)


@dataclass
class CrossValidationResult:
    folds: list[FoldRun]
    c_index_mean: float
    c_index_std: float
    pooled_logrank_stat: float
    pooled_logrank_p: float
    metrics_path: Path


def cross_validate(cohort: Cohort, config: TrainConfig,
                   out_dir: str | Path) -> CrossValidationResult:
    """Stratified k-fold training with pooled out-of-fold risk grouping."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    times = cohort.times()
    censor = cohort.censor_flags()
    boundaries, bins = discretize_survival(times, censor, config.n_bins)
    folds = make_folds(cohort, config.seed, config.n_folds)

    runs = []
    pooled_idx, pooled_s_mid = [], []
    for fold, (train_idx, val_idx) in enumerate(folds):
        run = run_fold(cohort, train_idx, val_idx, config, boundaries, bins,
                       fold, out_dir)
        runs.append(run)
        pooled_idx.append(val_idx)
        pooled_s_mid.append(run.result.s_mid)

    scores = np.array([run.result.c_index for run in runs])
    pooled_idx = np.concatenate(pooled_idx)
    pooled_s_mid = np.concatenate(pooled_s_mid)
    high, low = stats.split_by_median_risk(pooled_s_mid)
    high_idx, low_idx = pooled_idx[high], pooled_idx[low]
    stat, p = stats.log_rank(times[high_idx], censor[high_idx],
                             times[low_idx], censor[low_idx])
    km_path = out_dir / "km.tsv"
    stats.write_km_tsv(km_path, [
        ("high_risk", stats.km_curve(times[high_idx], censor[high_idx])),
        ("low_risk", stats.km_curve(times[low_idx], censor[low_idx])),
    ])

    metrics = {
        "folds": [{
            "fold": run.fold,
            "c_index": run.result.c_index,
            "logrank_stat": run.result.logrank_stat,
            "logrank_p": run.result.logrank_p,
            "n_validation": run.result.n_patients,
            "checkpoint": run.checkpoint_path.name,
            "retained_genes": list(run.retained_sizes) if run.retained_sizes
                              else None,
        } for run in runs],
        "c_index_mean": float(scores.mean()),
        "c_index_std": float(scores.std()),
        "pooled_logrank_stat": stat,
        "pooled_logrank_p": p,
        "km_tsv": km_path.name,
        "config": config.to_dict(),
    }
    metrics_path = out_dir / "metrics.json"
    write_json(metrics_path, metrics)
    return CrossValidationResult(runs, float(scores.mean()), float(scores.std()),
                                 stat, p, metrics_path)


def sweep_k(cohort: Cohort, config: TrainConfig, out_dir: str | Path,
            grid: Sequence[float] = SWEEP_K_GRID) -> list[dict]:
    """Cross-validation per masking percentage; TSV of c-indices."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in grid:
        sub = cross_validate(cohort, replace(config, k_percent=float(k)),
                             out_dir / f"k{k:g}")
        rows.append({"k": float(k), "c_index_mean": sub.c_index_mean,
                     "c_index_std": sub.c_index_std})
    with open(out_dir / "sweep_k.tsv", "w", newline="") as fh:
        fh.write("k\tc_index_mean\tc_index_std\n")
        for row in rows:
            fh.write(f"{row['k']:g}\t{row['c_index_mean']!r}\t"
                     f"{row['c_index_std']!r}\n")
    return rows


# ---------------------------------------------------------------------------
# association export
# ---------------------------------------------------------------------------

def export_associations(ckpt: CheckpointData, bag_features: np.ndarray,
                        path: str | Path, top_n: int = 4) -> None:
    """TSV of raw and masked association rows plus top patch indices."""
    model = ckpt.model
    if model.config.gated_baseline:
        raise ConfigError("a baseline checkpoint has no association matrix")
    with ad.no_grad():
        result = model_forward(model, bag_features)
    scores = result.assoc_scores.values
    masked = topk_masked_softmax(scores, model.config.k_percent)
    names = ckpt.category_names or [f"category_{c}" for c in range(scores.shape[0])]
    with open(path, "w", newline="") as fh:
        for c, name in enumerate(names):
            fh.write("\t".join(["raw", name,
                                *(repr(float(v)) for v in scores[c])]) + "\n")
        for c, name in enumerate(names):
            fh.write("\t".join(["masked", name,
                                *(repr(float(v)) for v in masked[c])]) + "\n")
        n_top = min(top_n, scores.shape[1])
        for c, name in enumerate(names):
            top = np.argsort(-masked[c], kind="stable")[:n_top]
            fh.write("\t".join(["topk", name,
                                *(str(int(i)) for i in top)]) + "\n")


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

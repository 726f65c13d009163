"""On-disk formats: patch-bag binary, clinical CSV, genomics TSV, manifest.

Bag files are little-endian binary ("GHB1" magic, u32 patch count, u32
feature dim, float32 row-major data), so write -> read round trips are
bit-exact. Text formats are plain csv/tsv readable by anything.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .datasets import (CATEGORY_NAMES, Cohort, GenomicProfile, PatchBag,
                       Patient, SurvivalLabel)
from .errors import DataFormatError

BAG_MAGIC = b"GHB1"
_BAG_HEADER = struct.Struct("<4sII")


def write_bag(path: str | Path, bag: PatchBag) -> None:
    features = np.ascontiguousarray(bag.features, dtype="<f4")
    header = _BAG_HEADER.pack(BAG_MAGIC, bag.n_patches, bag.feature_dim)
    Path(path).write_bytes(header + features.tobytes())


def read_bag(path: str | Path, patient_id: str | None = None) -> PatchBag:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _BAG_HEADER.size:
        raise DataFormatError(
            f"{path}: truncated header, {len(raw)} bytes (need {_BAG_HEADER.size})")
    magic, n_patches, dim = _BAG_HEADER.unpack_from(raw)
    if magic != BAG_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at byte 0, "
                              f"expected {BAG_MAGIC!r}")
    expected = _BAG_HEADER.size + 4 * n_patches * dim
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: truncated payload, {len(raw)} bytes (need {expected} "
            f"for a {n_patches}x{dim} bag)")
    flat = np.frombuffer(raw, dtype="<f4", offset=_BAG_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        offset = _BAG_HEADER.size + 4 * int(bad[0])
        raise DataFormatError(f"{path}: non-finite value at byte offset {offset}")
    features = flat.reshape(n_patches, dim).copy()
    return PatchBag(patient_id or path.stem, features)


# ---------------------------------------------------------------------------
# clinical CSV
# ---------------------------------------------------------------------------

CLINICAL_HEADER = ["patient_id", "time_months", "censor"]


def write_clinical(path: str | Path, patients: list[tuple[str, float, int]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CLINICAL_HEADER)
        for patient_id, time_months, censor in patients:
            writer.writerow([patient_id, repr(float(time_months)), censor])


def read_clinical(path: str | Path) -> dict[str, SurvivalLabel]:
    path = Path(path)
    labels: dict[str, SurvivalLabel] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CLINICAL_HEADER:
            raise DataFormatError(f"{path}: line 1: expected header "
                                  f"{','.join(CLINICAL_HEADER)!r}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"{path}: line {line_no}: expected 3 fields, "
                                      f"got {len(row)}")
            patient_id, time_field, censor_field = row
            if patient_id in labels:
                raise DataFormatError(
                    f"{path}: line {line_no}: duplicate patient id '{patient_id}'")
            try:
                time_months = float(time_field)
            except ValueError:
                raise DataFormatError(f"{path}: line {line_no}: bad time "
                                      f"'{time_field}'") from None
            if not np.isfinite(time_months) or time_months <= 0:
                raise DataFormatError(f"{path}: line {line_no}: time must be a "
                                      f"positive number, got '{time_field}'")
            if censor_field not in ("0", "1"):
                raise DataFormatError(f"{path}: line {line_no}: censor must be "
                                      f"0 or 1, got '{censor_field}'")
            labels[patient_id] = SurvivalLabel(time_months, int(censor_field))
    if not labels:
        raise DataFormatError(f"{path}: no patient rows")
    return labels


# ---------------------------------------------------------------------------
# genomics TSV (expression matrix + category sidecar)
# ---------------------------------------------------------------------------

def write_genomics(matrix_path: str | Path, categories_path: str | Path,
                   cohort: Cohort) -> None:
    """Expression matrix (genes x patients) plus gene -> category sidecar."""
    if cohort.gene_ids is None or cohort.category_names is None:
        raise DataFormatError("cohort carries no genomics to write")
    patient_ids = [p.patient_id for p in cohort]
    with open(matrix_path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["gene_id", *patient_ids])
        for c, ids in enumerate(cohort.gene_ids):
            for g, gene_id in enumerate(ids):
                values = [repr(float(p.genes.vectors[c][g])) for p in cohort]
                writer.writerow([gene_id, *values])
    with open(categories_path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["gene_id", "category"])
        for name, ids in zip(cohort.category_names, cohort.gene_ids):
            for gene_id in ids:
                writer.writerow([gene_id, name])


def read_genomics(matrix_path: str | Path, categories_path: str | Path,
                  ) -> tuple[dict[str, GenomicProfile], tuple[tuple[str, ...], ...]]:
    """Returns per-patient profiles plus per-category gene id lists.

    Categories follow the canonical fixed order; genes keep file order
    within each category.
    """
    categories_path = Path(categories_path)
    gene_category: dict[str, str] = {}
    with open(categories_path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != ["gene_id", "category"]:
            raise DataFormatError(f"{categories_path}: line 1: expected header "
                                  f"'gene_id\\tcategory', got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataFormatError(f"{categories_path}: line {line_no}: "
                                      f"expected 2 fields, got {len(row)}")
            gene_id, category = row
            if category not in CATEGORY_NAMES:
                raise DataFormatError(
                    f"{categories_path}: line {line_no}: unknown category "
                    f"'{category}' (expected one of {', '.join(CATEGORY_NAMES)})")
            if gene_id in gene_category:
                raise DataFormatError(f"{categories_path}: line {line_no}: "
                                      f"duplicate gene id '{gene_id}'")
            gene_category[gene_id] = category

    matrix_path = Path(matrix_path)
    per_category_ids: dict[str, list[str]] = {name: [] for name in CATEGORY_NAMES}
    per_category_rows: dict[str, list[np.ndarray]] = {name: [] for name in CATEGORY_NAMES}
    with open(matrix_path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if not header or header[0] != "gene_id" or len(header) < 2:
            raise DataFormatError(f"{matrix_path}: line 1: expected header "
                                  f"'gene_id' then patient ids")
        patient_ids = header[1:]
        if len(set(patient_ids)) != len(patient_ids):
            raise DataFormatError(f"{matrix_path}: line 1: duplicate patient ids")
        seen: set[str] = set()
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 1 + len(patient_ids):
                raise DataFormatError(
                    f"{matrix_path}: line {line_no}: expected "
                    f"{1 + len(patient_ids)} fields, got {len(row)}")
            gene_id = row[0]
            if gene_id in seen:
                raise DataFormatError(f"{matrix_path}: line {line_no}: duplicate "
                                      f"gene id '{gene_id}'")
            seen.add(gene_id)
            category = gene_category.get(gene_id)
            if category is None:
                raise DataFormatError(f"{matrix_path}: line {line_no}: gene "
                                      f"'{gene_id}' missing from category sidecar")
            try:
                values = np.array([float(v) for v in row[1:]])
            except ValueError:
                raise DataFormatError(f"{matrix_path}: line {line_no}: "
                                      f"non-numeric expression value") from None
            if not np.all(np.isfinite(values)):
                raise DataFormatError(f"{matrix_path}: line {line_no}: "
                                      f"non-finite expression value")
            per_category_ids[category].append(gene_id)
            per_category_rows[category].append(values)

    present = [name for name in CATEGORY_NAMES if per_category_ids[name]]
    if not present:
        raise DataFormatError(f"{matrix_path}: no gene rows")
    gene_ids = tuple(tuple(per_category_ids[name]) for name in present)
    stacks = {name: np.stack(per_category_rows[name]) for name in present}
    profiles = {}
    for j, patient_id in enumerate(patient_ids):
        vectors = tuple(stacks[name][:, j] for name in present)
        profiles[patient_id] = GenomicProfile(tuple(present), vectors)
    return profiles, gene_ids


# ---------------------------------------------------------------------------
# cohort manifest
# ---------------------------------------------------------------------------

def write_cohort(out_dir: str | Path, cohort: Cohort,
                 name: str = "cohort") -> Path:
    """Writes bags, clinical CSV, genomics (when present), and a manifest.

    Returns the manifest path; all entries inside it are relative to the
    manifest's directory.
    """
    out_dir = Path(out_dir)
    bag_dir = out_dir / "bags"
    bag_dir.mkdir(parents=True, exist_ok=True)
    bag_paths = {}
    for patient in cohort:
        rel = f"bags/{patient.patient_id}.bag"
        write_bag(out_dir / rel, patient.bag)
        bag_paths[patient.patient_id] = rel

    clinical_rel = f"{name}_clinical.csv"
    write_clinical(out_dir / clinical_rel,
                   [(p.patient_id, p.label.time_months, p.label.censor)
                    for p in cohort])

    manifest = {"clinical": clinical_rel, "bags": bag_paths}
    if cohort.category_sizes is not None:
        matrix_rel = f"{name}_genomics.tsv"
        categories_rel = f"{name}_gene_categories.tsv"
        write_genomics(out_dir / matrix_rel, out_dir / categories_rel, cohort)
        manifest["genomics"] = matrix_rel
        manifest["gene_categories"] = categories_rel

    manifest_path = out_dir / f"{name}_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_cohort(manifest_path: str | Path, with_genomics: bool = True) -> Cohort:
    """Reads a manifest back into a cohort.

    with_genomics=False skips the genomics files entirely (they may be
    absent from disk); the returned patients then carry no profiles.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise DataFormatError(f"{manifest_path}: invalid JSON: {err}") from None
    for key in ("clinical", "bags"):
        if key not in manifest:
            raise DataFormatError(f"{manifest_path}: missing '{key}' entry")
    base = manifest_path.parent
    labels = read_clinical(base / manifest["clinical"])

    profiles: dict[str, GenomicProfile] = {}
    gene_ids = None
    if with_genomics and "genomics" in manifest:
        if "gene_categories" not in manifest:
            raise DataFormatError(f"{manifest_path}: genomics listed without "
                                  f"'gene_categories'")
        profiles, gene_ids = read_genomics(base / manifest["genomics"],
                                           base / manifest["gene_categories"])

    patients = []
    for patient_id, rel in sorted(manifest["bags"].items()):
        if patient_id not in labels:
            raise DataFormatError(f"{manifest_path}: bag entry '{patient_id}' "
                                  f"has no clinical row")
        genes = None
        if profiles:
            genes = profiles.get(patient_id)
            if genes is None:
                raise DataFormatError(f"{manifest_path}: patient '{patient_id}' "
                                      f"missing from genomics matrix")
        patients.append(Patient(read_bag(base / rel, patient_id),
                                labels[patient_id], genes))
    cohort = Cohort(patients, gene_ids=gene_ids)
    cohort.validate()
    return cohort

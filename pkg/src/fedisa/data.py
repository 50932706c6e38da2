"""Measurement ingestion and preprocessing.

The pipeline is load -> stratified split -> KNN imputation -> PCA fitted on
the training split -> min-max scaling with training bounds -> partition of
the training split across clients. A synthetic generator with the same
128-column layout stands in for the MSU-ORNL PSA files when they are not
available.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DimensionError,
    ImputationError,
    InsufficientDataError,
    PartitionError,
    ReductionError,
    SchemaError,
)
from .numeric import ATTACK, NATURAL

PSA_FEATURES = 128
LABEL_COLUMNS = ("marker", "label", "class")
PROCESSED_SCHEMA = 1


@dataclass(frozen=True)
class RawDataset:
    features: np.ndarray  # NaN marks a missing cell
    labels: np.ndarray
    groups: np.ndarray  # per-row index into ``sources``
    sources: tuple[str, ...]

    @property
    def source_file(self) -> str:
        return ",".join(self.sources)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def k(self) -> int:
        return self.components.shape[0]


@dataclass(frozen=True)
class Bounds:
    lo: np.ndarray
    hi: np.ndarray


@dataclass(frozen=True)
class ProcessedDataset:
    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    bounds: Bounds | None = None

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "ProcessedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ProcessedDataset(self.features[idx], self.labels[idx], self.groups[idx], self.bounds)


@dataclass(frozen=True)
class Partition:
    clients: tuple[ProcessedDataset, ...]
    indices: tuple[np.ndarray, ...]  # rows of the training split held by each client
    scheme: str
    seed: int

    @property
    def k(self) -> int:
        return len(self.clients)


# ingestion

def _parse_cell(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        return math.nan
    return v if math.isfinite(v) else math.nan


def _parse_label(text: str, path, line: int) -> int:
    t = text.strip().lower()
    if t in ("1", "attack") or t.startswith("attack"):
        return ATTACK
    if t in ("0", "natural", "normal", "noevents", "no events") or t.startswith("natural"):
        return NATURAL
    raise SchemaError(f"{path}:{line}: unrecognised label {text!r}")


def load_psa(path, n_features: int = PSA_FEATURES) -> RawDataset:
    """Read one comma-separated measurement file.

    The header row is required and the last column must be the label marker
    (``marker``, ``label`` or ``class``). Cells that do not parse as finite
    numbers (``inf``, ``nan``, blanks) become NaN.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if not header or header[-1].strip().lower() not in LABEL_COLUMNS:
            raise SchemaError(f"{path}:1: last column must be one of {LABEL_COLUMNS}")
        if len(header) - 1 != n_features:
            raise SchemaError(f"{path}:1: expected {n_features} feature columns, found {len(header) - 1}")
        rows, labels = [], []
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise SchemaError(f"{path}:{line}: expected {len(header)} fields, found {len(rec)}")
            rows.append([_parse_cell(c) for c in rec[:-1]])
            labels.append(_parse_label(rec[-1], path, line))
    features = np.array(rows, dtype=np.float64).reshape(len(rows), n_features)
    return RawDataset(features, np.array(labels, dtype=np.int64), np.zeros(len(rows), dtype=np.int64), (path.name,))


def concat_raw(datasets: Sequence[RawDataset]) -> RawDataset:
    """Pool several files; group ids are renumbered in the given order."""
    feats, labels, groups, sources = [], [], [], []
    for ds in datasets:
        groups.append(ds.groups + len(sources))
        sources.extend(ds.sources)
        feats.append(ds.features)
        labels.append(ds.labels)
    return RawDataset(np.vstack(feats), np.concatenate(labels), np.concatenate(groups), tuple(sources))


def load_psa_many(paths: Sequence, n_features: int = PSA_FEATURES) -> RawDataset:
    return concat_raw([load_psa(p, n_features) for p in sorted(map(Path, paths))])


def write_psa_csv(raw: RawDataset, path, group: int | None = None) -> None:
    """Write rows (optionally one group only) in the ingestion layout; NaN is written as ``nan``."""
    mask = np.ones(len(raw), bool) if group is None else raw.groups == group
    d = raw.features.shape[1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"R{j}" for j in range(d)] + ["marker"])
        for row, lab in zip(raw.features[mask], raw.labels[mask]):
            w.writerow([repr(float(v)) for v in row] + ["Attack" if lab == ATTACK else "Natural"])


# imputation

def knn_impute(data, k: int = 5, donors=None) -> np.ndarray:
    """Fill NaN cells from the ``k`` nearest rows.

    Distance between two rows uses only the columns both observe, scaled by
    ``sqrt(d / observed_count)``. A missing cell takes the mean of that column
    over the nearest rows observing it (all of them if fewer than ``k``
    qualify, the column mean if none do). Ties in distance go to the lower
    row index. ``donors`` restricts neighbour search to another matrix;
    by default rows are imputed from the other rows of ``data``.
    """
    if k < 1:
        raise ValueError("k must be positive")
    x = np.array(data, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("expected a 2-D matrix")
    miss = np.isnan(x)
    if not miss.any():
        return x
    if np.any(miss.all(axis=1)):
        raise ImputationError("a row has no observed values")
    same = donors is None
    ref = x if same else np.array(donors, dtype=np.float64)
    if ref.shape[1] != x.shape[1]:
        raise DimensionError("donor matrix has a different column count")
    ref_obs = ~np.isnan(ref)
    ref_zero = np.where(ref_obs, ref, 0.0)
    col_count = ref_obs.sum(axis=0)
    col_mean = np.divide(ref_zero.sum(axis=0), col_count, out=np.full(x.shape[1], np.nan), where=col_count > 0)
    d = x.shape[1]
    out = x.copy()
    for i in np.flatnonzero(miss.any(axis=1)):
        row_obs = ~miss[i]
        common = ref_obs & row_obs
        cnt = common.sum(axis=1)
        diff = np.where(common, ref_zero - np.where(row_obs, x[i], 0.0), 0.0)
        sq = np.einsum("ij,ij->i", diff, diff)
        dist = np.full(ref.shape[0], np.inf)
        ok = cnt > 0
        dist[ok] = np.sqrt(sq[ok] * d / cnt[ok])
        if same:
            dist[i] = np.inf
        for j in np.flatnonzero(miss[i]):
            cand = np.flatnonzero(ref_obs[:, j] & np.isfinite(dist))
            if cand.size:
                nearest = cand[np.lexsort((cand, dist[cand]))][:k]
                out[i, j] = ref[nearest, j].mean()
            elif col_count[j] > 0:
                out[i, j] = col_mean[j]
            else:
                raise ImputationError(f"column {j} has no observed value to impute from")
    return out


# PCA

def pca_fit(data, k: int) -> PcaModel:
    """Principal axes from the eigendecomposition of the sample covariance.

    Components are ordered by decreasing variance and each is signed so
    that its largest-magnitude entry is positive.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientDataError("PCA needs at least two rows")
    if not 1 <= k <= x.shape[1]:
        raise ReductionError(f"cannot keep {k} components of {x.shape[1]} columns")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:k]
    comps = evecs[:, order].T.copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    comps *= signs[:, None]
    return PcaModel(mean, comps, np.clip(evals[order], 0.0, None))


def pca_transform(model: PcaModel, data) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise DimensionError(f"expected {model.dim} columns")
    return (x - model.mean) @ model.components.T


def pca_inverse(model: PcaModel, scores) -> np.ndarray:
    return model.mean + np.asarray(scores, dtype=np.float64) @ model.components


# scaling

def apply_bounds(bounds: Bounds, data) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != bounds.lo.shape[0]:
        raise DimensionError("column count does not match bounds")
    span = bounds.hi - bounds.lo
    flat = span <= 0
    out = (x - bounds.lo) / np.where(flat, 1.0, span)
    out[:, flat] = 0.5
    return np.clip(out, 0.0, 1.0)


def minmax_normalize(train, apply_to) -> tuple[np.ndarray, Bounds]:
    """Scale ``apply_to`` into [0, 1] with per-column bounds taken from ``train``.

    Values outside the training range are clamped and constant training
    columns map to 0.5.
    """
    t = np.asarray(train, dtype=np.float64)
    bounds = Bounds(t.min(axis=0), t.max(axis=0))
    return apply_bounds(bounds, apply_to), bounds


# splitting

def stratified_counts(labels, ratio: float) -> dict[int, int]:
    """Per-class training counts summing to floor(ratio * n), each within one of ratio * n_c."""
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    total = int(math.floor(ratio * y.size + 1e-9))
    exact = ratio * counts
    base = np.floor(exact + 1e-9).astype(int)
    remainder = exact - base
    extra = total - int(base.sum())
    for c in np.argsort(-remainder, kind="stable")[:max(extra, 0)]:
        base[c] += 1
    return {int(c): int(b) for c, b in zip(classes, base)}


def split_indices(labels, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded, label-stratified train/test split; both index arrays sorted."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    y = np.asarray(labels)
    if y.size < 2:
        raise InsufficientDataError("need at least two rows to split")
    rng = np.random.default_rng(seed)
    train = []
    for c, m in stratified_counts(y, ratio).items():
        members = np.flatnonzero(y == c)
        train.append(rng.permutation(members)[:m])
    train_idx = np.sort(np.concatenate(train))
    test_idx = np.setdiff1d(np.arange(y.size), train_idx)
    if train_idx.size == 0 or test_idx.size == 0:
        raise InsufficientDataError("split leaves one side empty")
    return train_idx, test_idx


def split(data, labels, ratio: float = 0.7, seed: int = 0):
    """Split rows of ``data`` (and ``labels``) into (train, test) pairs."""
    x = np.asarray(data)
    y = np.asarray(labels)
    tr, te = split_indices(y, ratio, seed)
    return (x[tr], y[tr]), (x[te], y[te])


# partitioning

PARTITION_SCHEMES = ("iid-shuffle", "per-file")


def partition(train: ProcessedDataset, k: int, scheme: str = "iid-shuffle", seed: int = 0) -> Partition:
    """Distribute the training split over ``k`` clients.

    ``iid-shuffle`` deals a seeded permutation round-robin. ``per-file``
    deals whole source files round-robin in ascending file order, so every
    file belongs to exactly one client.
    """
    n = len(train)
    if k < 1 or k > n:
        raise PartitionError(f"cannot split {n} rows over {k} clients")
    if scheme == "iid-shuffle":
        perm = np.random.default_rng(seed).permutation(n)
        idx = [np.sort(perm[c::k]) for c in range(k)]
    elif scheme == "per-file":
        files = np.unique(train.groups)
        if k > files.size:
            raise PartitionError(f"{files.size} files cannot cover {k} clients")
        owner = {int(f): i % k for i, f in enumerate(files)}
        assign = np.array([owner[int(g)] for g in train.groups])
        idx = [np.flatnonzero(assign == c) for c in range(k)]
    else:
        raise PartitionError(f"unknown partition scheme {scheme!r}")
    return Partition(tuple(train.subset(i) for i in idx), tuple(idx), scheme, seed)


# end-to-end

@dataclass(frozen=True)
class Prepared:
    train: ProcessedDataset
    test: ProcessedDataset
    pca: PcaModel
    sources: tuple[str, ...]


def preprocess(raw: RawDataset, n_components: int = 100, knn_k: int = 5, ratio: float = 0.7, seed: int = 0) -> Prepared:
    """Split, impute, reduce and scale a raw dataset.

    Imputation donors, the PCA model and the scaling bounds all come from
    the training split only.
    """
    tr, te = split_indices(raw.labels, ratio, seed)
    x_tr = knn_impute(raw.features[tr], knn_k)
    x_te = knn_impute(raw.features[te], knn_k, donors=raw.features[tr])
    pca = pca_fit(x_tr, n_components)
    s_tr = pca_transform(pca, x_tr)
    s_te = pca_transform(pca, x_te)
    f_tr, bounds = minmax_normalize(s_tr, s_tr)
    f_te = apply_bounds(bounds, s_te)
    return Prepared(
        ProcessedDataset(f_tr, raw.labels[tr], raw.groups[tr], bounds),
        ProcessedDataset(f_te, raw.labels[te], raw.groups[te], bounds),
        pca,
        raw.sources,
    )


def _write_table(path: Path, ds: ProcessedDataset) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(ds.features.shape[1])] + ["label", "group"])
        for row, lab, grp in zip(ds.features, ds.labels, ds.groups):
            w.writerow([repr(float(v)) for v in row] + [int(lab), int(grp)])


def _read_table(path: Path, bounds: Bounds) -> ProcessedDataset:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["label", "group"]:
            raise SchemaError(f"{path}:1: expected trailing label,group columns")
        rows = [rec for rec in reader if rec]
    width = len(header) - 2
    feats = np.array([[float(v) for v in rec[:width]] for rec in rows], dtype=np.float64).reshape(len(rows), width)
    labels = np.array([int(rec[width]) for rec in rows], dtype=np.int64)
    groups = np.array([int(rec[width + 1]) for rec in rows], dtype=np.int64)
    return ProcessedDataset(feats, labels, groups, bounds)


def save_processed(directory, prepared: Prepared) -> None:
    """Write ``train.csv``, ``test.csv`` and ``pipeline.json`` (PCA model and bounds)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / "train.csv", prepared.train)
    _write_table(out / "test.csv", prepared.test)
    meta = {
        "schema_version": PROCESSED_SCHEMA,
        "sources": list(prepared.sources),
        "pca": {
            "mean": prepared.pca.mean.tolist(),
            "components": prepared.pca.components.tolist(),
            "explained_variance": prepared.pca.explained_variance.tolist(),
        },
        "bounds": {"lo": prepared.train.bounds.lo.tolist(), "hi": prepared.train.bounds.hi.tolist()},
    }
    (out / "pipeline.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_processed(directory) -> Prepared:
    src = Path(directory)
    meta_path = src / "pipeline.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no processed dataset in {src}")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != PROCESSED_SCHEMA:
        raise SchemaError(f"{meta_path}: unsupported schema version")
    bounds = Bounds(np.array(meta["bounds"]["lo"], float), np.array(meta["bounds"]["hi"], float))
    pca = PcaModel(
        np.array(meta["pca"]["mean"], float),
        np.array(meta["pca"]["components"], float),
        np.array(meta["pca"]["explained_variance"], float),
    )
    return Prepared(_read_table(src / "train.csv", bounds), _read_table(src / "test.csv", bounds), pca, tuple(meta["sources"]))


# synthetic stand-in

def synthesize(
    n_rows: int = 2000,
    n_features: int = PSA_FEATURES,
    n_files: int = 15,
    attack_fraction: float = 0.3,
    missing_rate: float = 0.002,
    seed: int = 0,
    manifold_dim: int = 8,
    attack_dim: int = 20,
    attack_strength: float = 1.5,
    noise: float = 0.5,
) -> RawDataset:
    """Seeded substitute for the PSA measurements.

    Natural events lie near a low-dimensional linear manifold, with each file
    shifting the operating point (fault level). Attack rows add a large
    excursion in one of three fixed attack subspaces, the attack type cycling
    across files. A small fraction of cells is blanked out.
    """
    rng = np.random.default_rng(seed)
    basis = rng.standard_normal((n_features, manifold_dim)) / math.sqrt(manifold_dim)
    offset = rng.normal(0.0, 2.0, n_features)
    scale = rng.uniform(0.5, 2.0, n_features)
    attack_bases = [np.linalg.qr(rng.standard_normal((n_features, attack_dim)))[0] for _ in range(3)]
    file_shift = rng.normal(0.0, 1.0, (n_files, manifold_dim))

    groups = np.sort(np.arange(n_rows) % n_files)
    labels = (rng.random(n_rows) < attack_fraction).astype(np.int64)
    z = rng.standard_normal((n_rows, manifold_dim)) + file_shift[groups]
    x = z @ basis.T + noise * rng.standard_normal((n_rows, n_features))
    for i in np.flatnonzero(labels == ATTACK):
        b = attack_bases[groups[i] % 3]
        x[i] += attack_strength * (b @ rng.standard_normal(attack_dim))
    x = offset + scale * x
    if missing_rate > 0:
        holes = rng.random(x.shape) < missing_rate
        holes[holes.all(axis=1), 0] = False
        x[holes] = np.nan
    return RawDataset(x, labels, groups.astype(np.int64), tuple(f"synthetic{f + 1:02d}" for f in range(n_files)))

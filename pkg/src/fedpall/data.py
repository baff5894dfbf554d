"""Synthetic feature-drifted client data and CSV ingestion.

Every client shares the class-conditional source ``m_k + noise`` and the
label marginal; each client then applies its own affine drift map
``x -> Q diag(s) x + b``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataParseError
from .neural import make_rng

_GEN_STREAM = 1


@dataclass
class ClientDataset:
    client_id: int
    train_features: np.ndarray
    train_labels: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.train_features.shape[1]


@dataclass(frozen=True)
class DriftSpec:
    n_clients: int = 4
    n_classes: int = 5
    input_dim: int = 20
    samples_per_class: int = 250
    class_separation: float = 0.6
    noise_scale: float = 1.0
    rotation: bool = True
    scale_min: float = 0.7
    scale_max: float = 1.4
    shift_scale: float = 1.0
    test_ratio: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for key in ("n_clients", "n_classes"):
            if getattr(self, key) < 2:
                raise ValueError(f"{key} must be >= 2")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("scale_min/scale_max must satisfy 0 < scale_min <= scale_max")
        for key in ("samples_per_class", "input_dim"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")


@dataclass
class DriftMap:
    rotation: np.ndarray
    scales: np.ndarray
    shift: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x * self.scales) @ self.rotation.T + self.shift


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix via sign-corrected QR."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _n_test(count: int, ratio: float) -> int:
    return int(math.floor(count * ratio + 0.5))


def stratified_split(features: np.ndarray, labels: np.ndarray, test_ratio: float):
    """Per class, the last ``round(ratio * count)`` rows (in input order) go to test."""
    is_test = np.zeros(labels.shape[0], dtype=bool)
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        n_test = _n_test(idx.size, test_ratio)
        if n_test:
            is_test[idx[-n_test:]] = True
    return features[~is_test], labels[~is_test], features[is_test], labels[is_test]


def make_drift_maps(spec: DriftSpec) -> tuple[np.ndarray, list[DriftMap]]:
    """Shared class centers and the per-client drift maps for ``spec``."""
    rng = make_rng(spec.seed, _GEN_STREAM)
    centers = rng.normal(0.0, spec.class_separation, size=(spec.n_classes, spec.input_dim))
    maps = []
    for n in range(spec.n_clients):
        crng = make_rng(spec.seed, _GEN_STREAM, n + 1)
        q = random_rotation(spec.input_dim, crng) if spec.rotation else np.eye(spec.input_dim)
        s = crng.uniform(spec.scale_min, spec.scale_max, size=spec.input_dim)
        b = crng.normal(0.0, spec.shift_scale, size=spec.input_dim) if spec.shift_scale > 0 \
            else np.zeros(spec.input_dim)
        maps.append(DriftMap(q, s, b))
    return centers, maps


def generate_drifted_clients(spec: DriftSpec) -> list[ClientDataset]:
    centers, maps = make_drift_maps(spec)
    clients = []
    for n, dmap in enumerate(maps):
        srng = make_rng(spec.seed, _GEN_STREAM, n + 1, 1)
        labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
        raw = centers[labels] + srng.normal(0.0, spec.noise_scale, size=(labels.size, spec.input_dim))
        x = dmap.apply(raw)
        # interleave classes so train/test rows are not class-sorted blocks
        order = srng.permutation(labels.size)
        xtr, ytr, xte, yte = stratified_split(x[order], labels[order], spec.test_ratio)
        clients.append(ClientDataset(n, xtr, ytr, xte, yte))
    return clients


def load_csv_clients(paths, test_ratio: float = 0.2) -> list[ClientDataset]:
    """Load one CSV per client (header ``label,f1,...,fd``) and split 8:2 per class."""
    paths = [Path(p) for p in paths]
    parsed = []
    dim = None
    for path in paths:
        labels, rows = _read_csv(path)
        if dim is None:
            dim = rows.shape[1]
        elif rows.shape[1] != dim:
            raise DataParseError(f"{path}: feature dimension {rows.shape[1]} differs from {dim}")
        parsed.append((labels, rows))
    label_sets = [set(np.unique(y).tolist()) for y, _ in parsed]
    known = set().union(*label_sets)
    n_classes = max(known) + 1
    for path, ls in zip(paths, label_sets):
        if ls != set(range(n_classes)):
            raise DataParseError(f"{path}: labels {sorted(ls)} do not cover classes 0..{n_classes - 1}")
    clients = []
    for n, (labels, rows) in enumerate(parsed):
        clients.append(ClientDataset(n, *stratified_split(rows, labels, test_ratio)))
    return clients


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataParseError(f"{path}: empty dataset")
        if not header or header[0].strip() != "label" or len(header) < 2:
            raise DataParseError(f"{path}:1: header must be 'label,f1,...,fd'")
        width = len(header)
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataParseError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataParseError(f"{path}:{lineno}: {exc}") from None
            if label < 0:
                raise DataParseError(f"{path}:{lineno}: unknown label {label}")
            if not all(math.isfinite(v) for v in values):
                raise DataParseError(f"{path}:{lineno}: non-finite feature value")
            labels.append(label)
            rows.append(values)
    if not rows:
        raise DataParseError(f"{path}: empty dataset")
    return np.array(labels, dtype=np.int64), np.array(rows, dtype=np.float64)


def write_csv_client(path, features: np.ndarray, labels) -> None:
    """Write rows as ``label,f1..fd``; ``repr`` floats keep the round-trip bit-exact."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i + 1}" for i in range(features.shape[1])])
        for y, row in zip(labels, features):
            w.writerow([int(y)] + [repr(float(v)) for v in row])


def dump_clients(clients: list[ClientDataset], out_dir) -> list[Path]:
    """Write each client's train rows followed by its test rows to ``client_<n>.csv``.

    Reloading with the same test ratio reproduces the split because the test
    rows are the last rows of each class.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in clients:
        p = out_dir / f"client_{c.client_id}.csv"
        write_csv_client(p, np.vstack([c.train_features, c.test_features]),
                         np.concatenate([c.train_labels, c.test_labels]))
        paths.append(p)
    return paths

"""Class prototypes, their aggregation, and the prototype-mixed upload path."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError


@dataclass
class PrototypeSet:
    prototypes: np.ndarray  # (K, d); row k is the class-k mean feature
    counts: np.ndarray  # (K,) integer sample counts

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.prototypes.ndim != 2 or self.counts.shape != (self.prototypes.shape[0],):
            raise DimensionError(f"prototypes {self.prototypes.shape} / counts {self.counts.shape} mismatch")

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def copy(self) -> "PrototypeSet":
        return PrototypeSet(self.prototypes.copy(), self.counts.copy())


@dataclass(frozen=True)
class MixConfig:
    u_f: float = 0.5
    u_r: float = 1.0
    beta: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.u_f <= self.u_r <= 1.0:
            raise ValueError(f"need 0 <= u_f <= u_r <= 1, got u_f={self.u_f}, u_r={self.u_r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


@dataclass
class MixedFeatureRecord:
    feature: np.ndarray
    label: int
    client_id: int


def compute_local_prototypes(features: np.ndarray, labels, n_classes: int) -> PrototypeSet:
    """Per-class mean of ``features``; absent classes get a zero row and count 0."""
    labels = np.asarray(labels, dtype=np.intp)
    if features.shape[0] != labels.shape[0]:
        raise DimensionError("features and labels differ in length")
    counts = np.bincount(labels, minlength=n_classes)[:n_classes] if labels.size else np.zeros(n_classes, np.int64)
    sums = np.zeros((n_classes, features.shape[1]), dtype=features.dtype)
    np.add.at(sums, labels, features)
    safe = np.where(counts > 0, counts, 1)
    return PrototypeSet(sums / safe[:, None], counts)


def aggregate_global_prototypes(local_sets: list[PrototypeSet]) -> PrototypeSet:
    """Count-weighted average of client prototype sets, class by class."""
    if not local_sets:
        raise DimensionError("no prototype sets to aggregate")
    shape = local_sets[0].prototypes.shape
    for s in local_sets[1:]:
        if s.prototypes.shape != shape:
            raise DimensionError(f"prototype set shape {s.prototypes.shape} != {shape}")
    counts = np.stack([s.counts for s in local_sets])  # (N, K)
    totals = counts.sum(axis=0)
    safe = np.where(totals > 0, totals, 1)
    weights = counts / safe  # column k sums to 1 (or 0 when absent everywhere)
    protos = np.einsum("nk,nkd->kd", weights, np.stack([s.prototypes for s in local_sets]))
    return PrototypeSet(protos, totals)


def sample_mix_coefficient(rng: np.random.Generator, cfg: MixConfig, size=None):
    """Draw ``alpha ~ U(u_f, u_r)``; one scalar, or an array when ``size`` is given."""
    if cfg.u_f == cfg.u_r:
        return cfg.u_f if size is None else np.full(size, cfg.u_f)
    return rng.uniform(cfg.u_f, cfg.u_r, size=size)


def mix_with_prototype(z: np.ndarray, prototype: np.ndarray, alpha) -> np.ndarray:
    """``alpha * z + (1 - alpha) * prototype``; ``alpha`` may be per-row for batches."""
    z = np.asarray(z)
    prototype = np.asarray(prototype)
    if z.shape != prototype.shape:
        raise DimensionError(f"feature {z.shape} vs prototype {prototype.shape}")
    alpha = np.asarray(alpha)
    if z.ndim == 2 and alpha.ndim == 1:
        alpha = alpha[:, None]
    return alpha * z + (1.0 - alpha) * prototype


def bernoulli_mask(r: np.ndarray, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each element with probability ``beta``, zero it otherwise."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if beta == 1.0:
        return np.array(r, copy=True)
    keep = rng.random(np.shape(r)) < beta
    return np.where(keep, r, 0.0)


def build_upload_sets(features: np.ndarray, labels, global_prototypes: PrototypeSet, client_id: int,
                      cfg: MixConfig, rng: np.random.Generator) -> list[MixedFeatureRecord]:
    """One masked, prototype-mixed record per sample."""
    mixed = mix_features(features, labels, global_prototypes, cfg, rng)
    return [MixedFeatureRecord(row, int(y), int(client_id)) for row, y in zip(mixed, labels)]


def mix_features(features: np.ndarray, labels, global_prototypes: PrototypeSet, cfg: MixConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Batched core of :func:`build_upload_sets`; returns the ``(S, d)`` masked matrix."""
    labels = np.asarray(labels, dtype=np.intp)
    if features.shape[1] != global_prototypes.dim:
        raise DimensionError(f"feature dim {features.shape[1]} != prototype dim {global_prototypes.dim}")
    missing = sorted(set(np.unique(labels).tolist()) - set(np.flatnonzero(global_prototypes.counts > 0).tolist()))
    if missing:
        raise DomainError(f"classes {missing} have no global prototype; cannot mix")
    alpha = sample_mix_coefficient(rng, cfg, size=labels.shape[0])
    mixed = mix_with_prototype(features, global_prototypes.prototypes[labels], alpha)
    return bernoulli_mask(mixed, cfg.beta, rng)


# Wire format: repeated [u32 body_len][u16 client_id][u16 label][u32 d][d x f64], little-endian.
_HEADER = struct.Struct("<IHHI")


def encode_records(records: list[MixedFeatureRecord]) -> bytes:
    return encode_record_arrays(np.array([r.feature for r in records]).reshape(len(records), -1),
                                [r.label for r in records], [r.client_id for r in records])


def encode_record_arrays(features: np.ndarray, labels, client_ids) -> bytes:
    """Vectorized encoder for a batch of equal-dimension records."""
    n, d = features.shape
    dt = np.dtype([("len", "<u4"), ("cid", "<u2"), ("label", "<u2"), ("d", "<u4"), ("x", "<f8", (d,))])
    buf = np.zeros(n, dtype=dt)
    buf["len"] = dt.itemsize - 4
    buf["cid"] = np.asarray(client_ids, dtype=np.int64)
    buf["label"] = np.asarray(labels, dtype=np.int64)
    buf["d"] = d
    buf["x"] = features
    return buf.tobytes()


def decode_record_arrays(blob: bytes):
    """Decode a record stream into ``(features, labels, client_ids)`` arrays."""
    feats, labels, cids = [], [], []
    pos, end = 0, len(blob)
    while pos < end:
        if end - pos < _HEADER.size:
            raise ValueError(f"truncated record header at byte {pos}")
        body_len, cid, label, d = _HEADER.unpack_from(blob, pos)
        if body_len != 8 + 8 * d or pos + 4 + body_len > end:
            raise ValueError(f"malformed record at byte {pos}")
        feats.append(np.frombuffer(blob, dtype="<f8", count=d, offset=pos + _HEADER.size))
        labels.append(label)
        cids.append(cid)
        pos += 4 + body_len
    if not feats:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if len({f.size for f in feats}) != 1:
        raise ValueError("records in one stream must share a feature dimension")
    return (np.stack(feats).astype(np.float64), np.array(labels, dtype=np.int64),
            np.array(cids, dtype=np.int64))


def decode_records(blob: bytes) -> list[MixedFeatureRecord]:
    feats, labels, cids = decode_record_arrays(blob)
    return [MixedFeatureRecord(f, int(y), int(c)) for f, y, c in zip(feats, labels, cids)]

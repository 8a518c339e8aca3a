"""OOD scores from embeddings (higher means more OOD).

* k-th nearest-neighbour L2 distance to a bank of training ID embeddings
* Mahalanobis distance to the nearest class mean under a pooled covariance

Both are differentiable torch functions so that evaluation-time attacks can
descend them. Also holds the embedding-bank binary file format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ContractViolation, IngestionError, NumericalError

BANK_MAGIC = b"SGEB"
LABEL_MAGIC = b"SGEL"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4sHHII")  # magic, version, dtype code, dim, count
_LABEL_HEADER = struct.Struct("<4sHI")  # magic, version, count
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass(frozen=True)
class EmbeddingBank:
    embeddings: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        e = self.embeddings
        if e.ndim != 2 or e.shape[0] < 1:
            raise ContractViolation("bank embeddings must be a non-empty (N, d) matrix")
        if self.labels.shape != (e.shape[0],):
            raise ContractViolation("one label per bank row required")
        tol = 1e-6 if e.dtype == torch.float64 else 1e-4
        if float((e.norm(dim=1) - 1).abs().max()) > tol:
            raise ContractViolation("bank rows must be unit-norm")

    def __len__(self):
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class GaussianStats:
    class_means: torch.Tensor
    shared_precision: torch.Tensor


def default_k(n: int) -> int:
    return max(1, round(0.01 * n))


def _l2_to_rows(z: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
    # direct differences accumulated coordinate by coordinate, left to right, so any
    # naive implementation reproduces the distances bit for bit; queries go in
    # blocks to bound the (block, N) working set
    squeeze = z.ndim == 1
    q = z.reshape(-1, z.shape[-1])
    block = max(1, (1 << 22) // max(1, rows.shape[0]))
    parts = []
    for s in range(0, q.shape[0], block):
        acc = torch.zeros(min(block, q.shape[0] - s), rows.shape[0], dtype=rows.dtype)
        for j in range(q.shape[1]):
            diff = q[s:s + block, j, None] - rows[None, :, j]
            acc = acc + diff * diff
        if acc.requires_grad:
            # attacks differentiate the score; only the gradient matters there
            parts.append(acc.clamp_min(1e-300).sqrt())
        else:
            # numpy's sqrt is correctly rounded, torch's vectorised CPU sqrt can be off by an ulp
            parts.append(torch.from_numpy(np.sqrt(acc.numpy())))
    out = torch.cat(parts) if parts else torch.empty(0, rows.shape[0], dtype=rows.dtype)
    return out[0] if squeeze else out


def knn_score(z, bank: EmbeddingBank, k: int, exclude_self: bool = False) -> torch.Tensor:
    """Distance from ``z`` to its k-th nearest bank row (1-indexed).

    ``exclude_self`` drops one zero self-distance; only for scoring the bank's
    own members.
    """
    n = len(bank) - (1 if exclude_self else 0)
    if not 1 <= k <= n:
        raise ContractViolation(f"k must lie in [1, {n}], got {k}")
    z = torch.as_tensor(z, dtype=bank.embeddings.dtype)
    dist = _l2_to_rows(z, bank.embeddings)
    kth = k + 1 if exclude_self else k
    return torch.kthvalue(dist, kth, dim=-1).values


def fit_gaussian(bank: EmbeddingBank, ridge: float = 1e-3) -> GaussianStats:
    """Class means and the inverse of the pooled (ridge-regularised) covariance."""
    if ridge < 0:
        raise ContractViolation("ridge must be >= 0")
    z, y = bank.embeddings, bank.labels.long()
    if z.shape[0] < 2:
        raise ContractViolation("need at least two samples to fit a covariance")
    K = int(y.max()) + 1
    counts = torch.bincount(y, minlength=K)
    if bool((counts == 0).any()):
        missing = torch.nonzero(counts == 0).flatten().tolist()
        raise ContractViolation(f"classes without samples: {missing}")
    means = torch.stack([z[y == k].mean(dim=0) for k in range(K)])
    centred = z - means[y]
    cov = centred.T @ centred / z.shape[0]
    cov = cov + ridge * torch.eye(z.shape[1], dtype=z.dtype)
    try:
        precision = torch.linalg.inv(cov)
    except RuntimeError as exc:
        raise NumericalError(f"covariance inversion failed (ridge={ridge}): {exc}") from exc
    precision = (precision + precision.T) / 2
    eig_min = float(torch.linalg.eigvalsh(precision).min())
    if not eig_min > 0 or not bool(torch.isfinite(precision).all()):
        raise NumericalError(f"precision is not positive-definite (min eigenvalue {eig_min:.3g}, ridge={ridge})")
    return GaussianStats(means, precision)


def mahalanobis_score(z, stats: GaussianStats) -> torch.Tensor:
    """``min_k (z - mu_k)^T P (z - mu_k)``."""
    z = torch.as_tensor(z, dtype=stats.class_means.dtype)
    diff = z.unsqueeze(-2) - stats.class_means
    q = ((diff @ stats.shared_precision) * diff).sum(dim=-1)
    return q.min(dim=-1).values.clamp_min(0.0)


def detect(score, threshold):
    """True (OOD) iff ``score > threshold``; a tie counts as ID."""
    return np.asarray(score) > threshold


class KNNScorer:
    def __init__(self, bank: EmbeddingBank, k: int | None = None):
        self.bank = bank
        self.k = default_k(len(bank)) if k is None else k

    def __call__(self, z):
        return knn_score(z, self.bank, self.k)


class MahalanobisScorer:
    def __init__(self, bank: EmbeddingBank, ridge: float = 1e-3):
        self.stats = fit_gaussian(bank, ridge)

    def __call__(self, z):
        return mahalanobis_score(z, self.stats)


def make_scorer(name: str, bank: EmbeddingBank, k=None, ridge=1e-3):
    if name == "knn":
        return KNNScorer(bank, k)
    if name in ("mahalanobis", "maha"):
        return MahalanobisScorer(bank, ridge)
    raise ContractViolation(f"unknown scorer {name!r}")


def save_bank(bank: EmbeddingBank, path) -> None:
    """Write the bank file and its ``.labels`` sidecar (little-endian)."""
    path = Path(path)
    arr = bank.embeddings.detach().cpu().numpy()
    code = 2 if arr.dtype == np.float64 else 1
    arr = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code])
    n, d = arr.shape
    labels = np.ascontiguousarray(bank.labels.cpu().numpy(), dtype="<i8")
    try:
        with open(path, "wb") as fh:
            fh.write(_BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, code, d, n))
            fh.write(arr.tobytes())
        with open(str(path) + ".labels", "wb") as fh:
            fh.write(_LABEL_HEADER.pack(LABEL_MAGIC, BANK_VERSION, n))
            fh.write(labels.tobytes())
    except OSError as exc:
        raise IngestionError(f"cannot write embedding bank ({exc.strerror})", path) from exc


def load_bank(path) -> EmbeddingBank:
    path = Path(path)
    try:
        raw = path.read_bytes()
        raw_labels = Path(str(path) + ".labels").read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read embedding bank ({exc.strerror})", exc.filename) from exc
    if len(raw) < _BANK_HEADER.size:
        raise IngestionError("truncated bank header", path)
    magic, version, code, d, n = _BANK_HEADER.unpack_from(raw)
    if magic != BANK_MAGIC or version != BANK_VERSION or code not in _DTYPE_CODES:
        raise IngestionError("not a version-1 embedding bank", path)
    dtype = _DTYPE_CODES[code]
    if len(raw) != _BANK_HEADER.size + n * d * dtype.itemsize:
        raise IngestionError("bank payload size does not match header", path)
    arr = np.frombuffer(raw, dtype=dtype, offset=_BANK_HEADER.size).reshape(n, d)
    lmagic, lversion, ln = _LABEL_HEADER.unpack_from(raw_labels)
    if lmagic != LABEL_MAGIC or ln != n or len(raw_labels) != _LABEL_HEADER.size + 8 * n:
        raise IngestionError("label sidecar does not match bank", str(path) + ".labels")
    labels = np.frombuffer(raw_labels, dtype="<i8", offset=_LABEL_HEADER.size)
    return EmbeddingBank(torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))),
                         torch.from_numpy(labels.astype(np.int64)))

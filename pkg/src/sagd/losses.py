"""Multi-geometry loss stack: hypersphere (compactness + disparity),
hyperbolic supervised contrastive, cross-entropy, and prototype upkeep."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from .errors import ContractViolation
from .geometry import BallConfig, in_ball, pairwise_geodesic


def _unit_tol(x: torch.Tensor) -> float:
    # single precision gets the 100x relaxed tolerance
    return 1e-6 if x.dtype == torch.float64 else 1e-4


def _check_unit_rows(z: torch.Tensor, what: str) -> None:
    err = (torch.linalg.vector_norm(z.detach(), dim=-1) - 1).abs()
    if err.numel() and float(err.max()) > _unit_tol(z):
        raise ContractViolation(f"{what} must be unit-norm (max deviation {float(err.max()):.3g})")


@dataclass(frozen=True)
class PrototypeBank:
    """K unit-norm class prototypes with a vMF temperature."""

    prototypes: torch.Tensor
    temperature: float = 0.1
    ema_factor: float = 0.95

    def __post_init__(self):
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 1:
            raise ContractViolation("prototypes must be a (K, d) matrix with K >= 1")
        if not self.temperature > 0:
            raise ContractViolation(f"temperature must be > 0, got {self.temperature}")
        # 1.0 is accepted as the frozen-bank degenerate case
        if not 0 <= self.ema_factor <= 1:
            raise ContractViolation(f"ema_factor must lie in [0, 1], got {self.ema_factor}")
        _check_unit_rows(self.prototypes, "prototype rows")

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @classmethod
    def random(cls, num_classes, dim, temperature=0.1, ema_factor=0.95, seed=0, dtype=torch.float64):
        gen = torch.Generator().manual_seed(seed)
        raw = torch.randn(num_classes, dim, generator=gen, dtype=dtype)
        return cls(raw / raw.norm(dim=1, keepdim=True), temperature, ema_factor)


@dataclass(frozen=True)
class ContrastiveBatch:
    """Ball embeddings of the joined set ``I = A u X``.

    ``positives`` maps each anchor index to its positive index set; anchors
    are exactly the keys. ``candidate_set`` indexes the augmented views that
    serve as contrast candidates.
    """

    embeddings: torch.Tensor
    positives: Mapping[int, Sequence[int]]
    candidate_set: Sequence[int]

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if not len(self.candidate_set):
            raise ContractViolation("candidate set is empty")
        for a in self.candidate_set:
            if not 0 <= a < n:
                raise ContractViolation(f"candidate index {a} out of range")
        for i, ps in self.positives.items():
            if not 0 <= i < n:
                raise ContractViolation(f"anchor index {i} out of range")
            if len(ps) == 0:
                raise ContractViolation(f"anchor {i} has no positives")
            if i in ps:
                raise ContractViolation(f"anchor {i} lists itself as a positive")
            for p in ps:
                if not 0 <= p < n:
                    raise ContractViolation(f"positive index {p} out of range")

    @classmethod
    def from_labels(cls, embeddings, labels, candidate_set):
        """Positives of ``i`` are all other members of ``I`` sharing its label."""
        labels = torch.as_tensor(labels)
        same = labels[:, None] == labels[None, :]
        same.fill_diagonal_(False)
        positives = {}
        for i in range(len(labels)):
            idx = torch.nonzero(same[i]).flatten().tolist()
            if idx:
                positives[i] = idx
        return cls(embeddings, positives, list(candidate_set))


@dataclass
class LossBreakdown:
    compactness: torch.Tensor
    disparity: torch.Tensor
    hypersphere: torch.Tensor
    hyperbolic: torch.Tensor
    cross_entropy: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in
                ("compactness", "disparity", "hypersphere", "hyperbolic", "cross_entropy", "total")}


@dataclass(frozen=True)
class LossConfig:
    hyperbolic_temperature: float = 0.1
    hyperbolic_reduction: str = "sum"
    weight_hypersphere: float = 1.0
    weight_hyperbolic: float = 1.0
    weight_ce: float = 1.0
    ball: BallConfig = field(default_factory=BallConfig)


def vmf_class_probability(z, bank: PrototypeBank, k=None) -> torch.Tensor:
    """Softmax of prototype similarities ``mu_k . z / tau``.

    Returns the probability of class ``k`` (or the full vector if ``k`` is None).
    """
    z = torch.as_tensor(z, dtype=bank.prototypes.dtype)
    _check_unit_rows(z, "embedding")
    probs = torch.softmax(z @ bank.prototypes.T / bank.temperature, dim=-1)
    if k is None:
        return probs
    if not 0 <= k < bank.num_classes:
        raise ContractViolation(f"class index {k} out of range")
    return probs[..., k]


def compactness_loss(embeddings, labels, bank: PrototypeBank) -> torch.Tensor:
    """Mean negative log vMF likelihood of each embedding under its class prototype."""
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ContractViolation("compactness_loss needs a non-empty (N, d) batch")
    _check_unit_rows(embeddings, "embeddings")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.min() < 0 or labels.max() >= bank.num_classes:
        raise ContractViolation("label out of range for the prototype bank")
    logits = embeddings @ bank.prototypes.T / bank.temperature
    return F.cross_entropy(logits, labels)


def disparity_loss(bank: PrototypeBank) -> torch.Tensor:
    """Mean over prototypes of log mean_{j != i} exp(mu_i . mu_j / tau).

    Positive sign: minimising it spreads the prototypes apart.
    """
    K = bank.num_classes
    if K < 2:
        raise ContractViolation("disparity loss needs at least two prototypes")
    mu = bank.prototypes
    sim = mu @ mu.T / bank.temperature
    eye = torch.eye(K, dtype=torch.bool, device=mu.device)
    sim = sim.masked_fill(eye, float("-inf"))
    per_proto = torch.logsumexp(sim, dim=1) - torch.log(torch.tensor(K - 1.0, dtype=mu.dtype))
    return per_proto.mean()


def hyperbolic_contrastive_loss(batch: ContrastiveBatch, tau: float, cfg: BallConfig,
                                reduction: str = "sum") -> torch.Tensor:
    """Supervised contrastive loss with negated geodesic distance as similarity.

    The denominator of anchor ``i`` runs over ``candidate_set`` minus ``i``.
    """
    if not tau > 0:
        raise ContractViolation(f"tau must be > 0, got {tau}")
    if reduction not in ("sum", "mean"):
        raise ContractViolation(f"unknown reduction {reduction!r}")
    z = batch.embeddings
    if not in_ball(z.detach(), cfg):
        raise ContractViolation("embeddings must lie inside the ball")
    anchors = sorted(batch.positives)
    n = z.shape[0]
    cand = torch.as_tensor(list(batch.candidate_set), dtype=torch.long)
    anchor_idx = torch.as_tensor(anchors, dtype=torch.long)

    dist = pairwise_geodesic(z[anchor_idx], z, cfg)
    logits = -dist / tau

    self_mask = cand.unsqueeze(0) == anchor_idx.unsqueeze(1)
    if bool(self_mask.all(dim=1).any()):
        raise ContractViolation("an anchor has no contrast candidates besides itself")
    log_denom = torch.logsumexp(logits[:, cand].masked_fill(self_mask, float("-inf")), dim=1)

    rows = [row for row, i in enumerate(anchors) for _ in batch.positives[i]]
    cols = [p for i in anchors for p in batch.positives[i]]
    pos_mask = torch.zeros(len(anchors), n, dtype=logits.dtype)
    pos_mask[rows, cols] = 1.0
    pos_mask = pos_mask / pos_mask.sum(dim=1, keepdim=True)
    log_prob = logits - log_denom.unsqueeze(1)
    per_anchor = -(pos_mask * log_prob.masked_fill(pos_mask == 0, 0.0)).sum(dim=1)
    return per_anchor.sum() if reduction == "sum" else per_anchor.mean()


def update_prototypes(bank: PrototypeBank, embeddings, labels) -> PrototypeBank:
    """EMA of each present class's mean embedding, renormalised. Absent classes keep their row."""
    z = embeddings.detach().to(bank.prototypes.dtype)
    labels = torch.as_tensor(labels, dtype=torch.long)
    mu = bank.prototypes.clone()
    a = bank.ema_factor
    for k in torch.unique(labels).tolist():
        mean = z[labels == k].mean(dim=0)
        mu[k] = a * mu[k] + (1 - a) * mean
    mu = mu / mu.norm(dim=1, keepdim=True)
    return replace(bank, prototypes=mu)


def total_loss(outputs, labels, bank: PrototypeBank, batch: ContrastiveBatch,
               cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Sum of the hypersphere, hyperbolic and cross-entropy terms.

    ``outputs`` must expose ``logits`` and ``sphere_embedding`` for the full
    set; ``batch`` carries the matching ball embeddings.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    com = compactness_loss(outputs.sphere_embedding, labels, bank)
    dis = disparity_loss(bank) if bank.num_classes > 1 else torch.zeros((), dtype=com.dtype)
    sph = com + dis
    hyp = hyperbolic_contrastive_loss(batch, cfg.hyperbolic_temperature, cfg.ball,
                                      cfg.hyperbolic_reduction)
    ce = F.cross_entropy(outputs.logits, labels)
    total = cfg.weight_hypersphere * sph + cfg.weight_hyperbolic * hyp + cfg.weight_ce * ce
    return LossBreakdown(com, dis, sph, hyp, ce, total)

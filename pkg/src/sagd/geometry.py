"""Hypersphere and Poincare-ball primitives.

Every function works on torch tensors whose last axis holds coordinates, so
a single point, a batch, or a broadcastable pair of batches all go through
the same code path. Ball operations clamp their output back into the open
ball (see :func:`project_to_ball`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ContractViolation, DegenerateInputError, NonFiniteInput

MIN_NORM = 1e-15


@dataclass(frozen=True)
class BallConfig:
    """Curvature-``c`` Poincare ball ``{u : c |u|^2 < 1}``.

    ``clip_radius`` is the Euclidean radius used by :func:`feature_clip`
    before features are mapped into the ball.
    """

    curvature: float = 0.01
    clip_radius: float = 2.0
    boundary_eps: float = 1e-5

    def __post_init__(self):
        if not self.curvature > 0:
            raise ContractViolation(f"curvature must be > 0, got {self.curvature}")
        if not self.clip_radius > 0:
            raise ContractViolation(f"clip_radius must be > 0, got {self.clip_radius}")
        if not 0 < self.boundary_eps <= 1e-3:
            raise ContractViolation(f"boundary_eps must lie in (0, 1e-3], got {self.boundary_eps}")

    @property
    def radius(self) -> float:
        """Euclidean radius ``1/sqrt(c)`` of the ball."""
        return 1.0 / math.sqrt(self.curvature)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _sqnorm(x: torch.Tensor) -> torch.Tensor:
    return (x * x).sum(dim=-1, keepdim=True)


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    # exact zero at the origin, finite gradient everywhere
    sq = _sqnorm(x)
    return torch.where(sq > 0, sq.clamp_min(MIN_NORM**2).sqrt(), torch.zeros_like(sq))


def _check_same_dim(u: torch.Tensor, v: torch.Tensor) -> None:
    if u.shape[-1] != v.shape[-1]:
        raise ContractViolation(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")


def project_to_ball(u, cfg: BallConfig) -> torch.Tensor:
    """Radially rescale points with ``c|u|^2 > 1 - boundary_eps`` onto that shell."""
    u = _as_tensor(u)
    c = cfg.curvature
    max_sq = (1.0 - cfg.boundary_eps) / c
    sq = _sqnorm(u)
    scale = torch.sqrt(max_sq / sq.clamp_min(MIN_NORM**2))
    return torch.where(sq > max_sq, u * scale, u)


def mobius_add(u, v, cfg: BallConfig) -> torch.Tensor:
    """Gyrovector addition ``u (+)_c v`` on the Poincare ball."""
    u, v = _as_tensor(u), _as_tensor(v)
    _check_same_dim(u, v)
    c = cfg.curvature
    uv = (u * v).sum(dim=-1, keepdim=True)
    u2, v2 = _sqnorm(u), _sqnorm(v)
    num = (1 + 2 * c * uv + c * v2) * u + (1 - c * u2) * v
    denom = 1 + 2 * c * uv + c**2 * u2 * v2
    if bool((denom.detach() < 1e-12).any()):
        raise DegenerateInputError("mobius_add denominator below 1e-12")
    return project_to_ball(num / denom, cfg)


def mobius_neg(u) -> torch.Tensor:
    return -_as_tensor(u)


def mobius_scalar_mul(r: float, u, cfg: BallConfig) -> torch.Tensor:
    """Mobius scalar multiplication ``r (x)_c u``; the origin maps to itself."""
    u = _as_tensor(u)
    sc = math.sqrt(cfg.curvature)
    n = _safe_norm(u)
    arg = (sc * n).clamp_max(1 - 1e-15)
    out = torch.tanh(r * torch.atanh(arg)) * u / (sc * n.clamp_min(MIN_NORM))
    return project_to_ball(out, cfg)


def conformal_factor(u, cfg: BallConfig) -> torch.Tensor:
    """``2 / (1 - c|u|^2)``; raises on points at (or numerically past) the boundary."""
    u = _as_tensor(u)
    gap = 1.0 - cfg.curvature * _sqnorm(u)
    if bool((gap.detach() < 0.5 * cfg.boundary_eps).any()):
        raise DegenerateInputError("point lies on or outside the ball boundary")
    return (2.0 / gap).squeeze(-1)


def geodesic_distance(u, v, cfg: BallConfig) -> torch.Tensor:
    """``(2/sqrt(c)) artanh(sqrt(c) |(-u) (+)_c v|)``, broadcasting over leading axes."""
    u, v = _as_tensor(u), _as_tensor(v)
    sc = math.sqrt(cfg.curvature)
    w = mobius_add(-u, v, cfg)
    arg = (sc * _safe_norm(w)).clamp_max(1 - 1e-15)
    return (2.0 / sc) * torch.atanh(arg).squeeze(-1)


def pairwise_geodesic(u, v, cfg: BallConfig) -> torch.Tensor:
    """Distance matrix between rows of ``u`` (n, d) and rows of ``v`` (m, d).

    Uses ``|(-u) (+)_c v|^2 = |u-v|^2 / ((1-c|u|^2)(1-c|v|^2) + c|u-v|^2)`` on a
    Gram matrix, so memory is O(nm) rather than O(nmd). Agrees with
    :func:`geodesic_distance` up to rounding in ``|u-v|^2``.
    """
    u, v = _as_tensor(u), _as_tensor(v)
    _check_same_dim(u, v)
    c = cfg.curvature
    u2 = (u * u).sum(-1, keepdim=True)
    v2 = (v * v).sum(-1).unsqueeze(-2)
    diff2 = (u2 + v2 - 2 * u @ v.transpose(-1, -2)).clamp_min(0.0)
    w2 = diff2 / ((1 - c * u2) * (1 - c * v2) + c * diff2)
    # same shell clamp as project_to_ball
    t2 = (c * w2).clamp_max(1 - cfg.boundary_eps)
    t = torch.where(t2 > 0, t2.clamp_min(MIN_NORM**2).sqrt(), torch.zeros_like(t2))
    return (2.0 / math.sqrt(c)) * torch.atanh(t)


def exp_map_origin(v, cfg: BallConfig) -> torch.Tensor:
    """Exponential map at the origin: ``tanh(sqrt(c)|v|) v / (sqrt(c)|v|)``."""
    v = _as_tensor(v)
    if not bool(torch.isfinite(v).all()):
        raise NonFiniteInput("exp_map_origin received non-finite input")
    sc = math.sqrt(cfg.curvature)
    n = _safe_norm(v)
    out = torch.tanh(sc * n) * v / (sc * n.clamp_min(MIN_NORM))
    return project_to_ball(out, cfg)


def log_map_origin(u, cfg: BallConfig) -> torch.Tensor:
    """Inverse of :func:`exp_map_origin`."""
    u = _as_tensor(u)
    sc = math.sqrt(cfg.curvature)
    n = _safe_norm(u)
    arg = (sc * n).clamp_max(1 - 1e-15)
    return torch.atanh(arg) * u / (sc * n.clamp_min(MIN_NORM))


def feature_clip(x, r: float) -> torch.Tensor:
    """Shrink ``x`` to norm ``r`` if it is longer: ``min(1, r/|x|) * x``."""
    x = _as_tensor(x)
    n = _safe_norm(x)
    return x * torch.clamp(r / n.clamp_min(MIN_NORM), max=1.0)


def sphere_project(x, min_norm: float = 1e-12) -> torch.Tensor:
    """L2-normalise ``x`` along the last axis."""
    x = _as_tensor(x)
    n = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((n.detach() <= min_norm).any()):
        raise DegenerateInputError("cannot project a near-zero vector onto the sphere")
    return x / n


def in_ball(u, cfg: BallConfig) -> bool:
    """True if every point satisfies the clamped-ball invariant (small rounding slack)."""
    u = _as_tensor(u)
    sq = cfg.curvature * _sqnorm(u)
    return bool((sq <= 1 - cfg.boundary_eps + 1e-12).all())

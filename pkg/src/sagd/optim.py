"""Riemannian sharpness-aware minimisation (RSAM) and a sharpness probe.

Parameter groups carry a ``manifold`` tag (``euclidean``, ``sphere`` or
``poincare``). Sphere and ball tags treat the last axis of a parameter as the
point coordinates, so a (K, d) tensor is K points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, ContractViolation, DivergenceError
from .geometry import BallConfig, MIN_NORM, conformal_factor, mobius_add, project_to_ball

MANIFOLDS = ("euclidean", "sphere", "poincare")


@dataclass(frozen=True)
class RSAMConfig:
    rho: float = 0.05
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_norm_eps: float = 1e-12
    radius_mode: str = "per_group"

    def __post_init__(self):
        if self.rho < 0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.radius_mode not in ("per_group", "global"):
            raise ConfigError(f"unknown radius_mode {self.radius_mode!r}")


@dataclass(frozen=True)
class ManifoldTag:
    kind: str = "euclidean"
    curvature: float = 1.0

    def __post_init__(self):
        if self.kind not in MANIFOLDS:
            raise ContractViolation(f"unknown manifold kind {self.kind!r}")
        if self.kind == "poincare" and not self.curvature > 0:
            raise ContractViolation("poincare tag needs a positive curvature")

    def ball(self) -> BallConfig:
        return BallConfig(curvature=self.curvature)


EUCLIDEAN = ManifoldTag()


def _rows(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(-1, x.shape[-1]) if x.ndim > 1 else x.reshape(1, -1)


def riemannian_gradient(grad: torch.Tensor, theta: torch.Tensor, tag: ManifoldTag) -> torch.Tensor:
    if grad.shape != theta.shape:
        raise ContractViolation(f"gradient shape {tuple(grad.shape)} != parameter shape {tuple(theta.shape)}")
    if tag.kind == "euclidean":
        return grad
    g, t = _rows(grad), _rows(theta)
    if tag.kind == "sphere":
        out = g - (g * t).sum(-1, keepdim=True) * t
    else:
        lam = conformal_factor(t, tag.ball()).unsqueeze(-1)
        out = g / lam**2
    return out.reshape(grad.shape)


def metric_sqnorm(v: torch.Tensor, theta: torch.Tensor, tag: ManifoldTag) -> torch.Tensor:
    """Squared norm of tangent vector ``v`` in the metric at ``theta``."""
    if tag.kind != "poincare":
        return (v * v).sum()
    lam = conformal_factor(_rows(theta), tag.ball())
    return (lam**2 * (_rows(v) ** 2).sum(-1)).sum()


def compute_perturbation(riem_grad: torch.Tensor, rho: float, tag: ManifoldTag, theta: torch.Tensor,
                         grad_norm_eps: float = 1e-12) -> torch.Tensor:
    """``rho * g / |g|_theta``, or zero when ``|g|_theta`` is below the guard."""
    norm = math.sqrt(float(metric_sqnorm(riem_grad, theta, tag)))
    if rho == 0 or norm < grad_norm_eps:
        return torch.zeros_like(riem_grad)
    return riem_grad * (rho / norm)


def retraction(theta: torch.Tensor, delta: torch.Tensor, tag: ManifoldTag) -> torch.Tensor:
    if tag.kind == "euclidean":
        return theta + delta
    t, d = _rows(theta), _rows(delta)
    if tag.kind == "sphere":
        out = t + d
        out = out / out.norm(dim=-1, keepdim=True)
    else:
        ball = tag.ball()
        sc = math.sqrt(ball.curvature)
        lam = conformal_factor(t, ball).unsqueeze(-1)
        dn = d.norm(dim=-1, keepdim=True)
        step = torch.tanh(sc * lam * dn / 2) * d / (sc * dn.clamp_min(MIN_NORM))
        out = project_to_ball(mobius_add(t, step, ball), ball)
    return out.reshape(theta.shape)


def _tag_of(group) -> ManifoldTag:
    return ManifoldTag(group.get("manifold", "euclidean"), group.get("curvature", 1.0))


def _check_finite(loss, stage, extra=None):
    if not bool(torch.isfinite(loss.detach()).all()):
        payload = {"stage": stage, "loss": float(loss.detach())}
        payload.update(extra or {})
        raise DivergenceError(f"non-finite loss during {stage}", payload)


class RSAM(torch.optim.Optimizer):
    """Two-pass perturb-then-descend optimizer with momentum SGD as the base.

    ``step(closure)`` expects ``closure()`` to return the loss *without*
    calling backward. With ``rho == 0`` the update is exactly momentum SGD.
    """

    def __init__(self, params, cfg: RSAMConfig = RSAMConfig()):
        defaults = dict(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                        rho=cfg.rho, manifold="euclidean", curvature=1.0)
        super().__init__(params, defaults)
        self.cfg = cfg
        for group in self.param_groups:
            _tag_of(group)

    def _params_with_grad(self):
        for group in self.param_groups:
            tag = _tag_of(group)
            for p in group["params"]:
                if p.grad is not None:
                    yield group, tag, p

    @torch.no_grad()
    def _perturbations(self):
        """Per-parameter ``delta*`` with the configured radius allocation."""
        rgrads, sq_by_group = {}, {}
        for group, tag, p in self._params_with_grad():
            g = riemannian_gradient(p.grad, p, tag)
            rgrads[p] = (group, tag, g)
            sq_by_group[id(group)] = sq_by_group.get(id(group), 0.0) + float(metric_sqnorm(g, p, tag))
        deltas = {}
        total = math.sqrt(sum(sq_by_group.values()))
        for p, (group, tag, g) in rgrads.items():
            norm = total if self.cfg.radius_mode == "global" else math.sqrt(sq_by_group[id(group)])
            rho = group["rho"]
            if rho == 0 or norm < self.cfg.grad_norm_eps:
                continue
            deltas[p] = (tag, g * (rho / norm))
        return deltas, total

    def _grad_norm(self):
        return math.sqrt(sum(float((p.grad * p.grad).sum()) for _, _, p in self._params_with_grad()))

    def step(self, closure):
        self.zero_grad()
        with torch.enable_grad():
            loss = closure()
        _check_finite(loss, "first pass", {"step": self.state.get("_step", 0)})
        loss.backward()
        grad_norm = self._grad_norm()

        deltas, _ = self._perturbations()
        perturbed_loss, perturbed_grad_norm = loss, grad_norm
        if deltas:
            backup = {}
            with torch.no_grad():
                for p, (tag, d) in deltas.items():
                    backup[p] = p.detach().clone()
                    p.copy_(retraction(p, d, tag))
            self.zero_grad()
            try:
                with torch.enable_grad():
                    perturbed_loss = closure()
                _check_finite(perturbed_loss, "perturbed pass",
                              {"step": self.state.get("_step", 0), "grad_norm": grad_norm})
                perturbed_loss.backward()
            finally:
                with torch.no_grad():
                    for p, old in backup.items():
                        p.copy_(old)
            perturbed_grad_norm = self._grad_norm()

        self._descend()
        for _, _, p in self._params_with_grad():
            if not bool(torch.isfinite(p).all()):
                raise DivergenceError("non-finite parameters after update",
                                      {"stage": "descent", "step": self.state.get("_step", 0),
                                       "loss": float(loss.detach()), "grad_norm": grad_norm})
        self.state["_step"] = self.state.get("_step", 0) + 1
        return {"loss": float(loss.detach()), "perturbed_loss": float(perturbed_loss.detach()),
                "grad_norm": grad_norm, "perturbed_grad_norm": perturbed_grad_norm}

    @torch.no_grad()
    def _descend(self):
        for group in self.param_groups:
            tag = _tag_of(group)
            lr, momentum, wd = group["lr"], group["momentum"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                # same op order as torch.optim.SGD so rho=0 is bitwise identical
                d_p = p.grad
                if wd != 0:
                    d_p = d_p.add(p, alpha=wd)
                if tag.kind != "euclidean":
                    d_p = riemannian_gradient(d_p, p, tag)
                if momentum != 0:
                    state = self.state[p]
                    buf = state.get("momentum_buffer")
                    if buf is None:
                        buf = torch.clone(d_p).detach()
                        state["momentum_buffer"] = buf
                    else:
                        if tag.kind == "sphere":
                            buf.copy_(riemannian_gradient(buf, p, tag))
                        buf.mul_(momentum).add_(d_p)
                    d_p = buf
                if tag.kind == "euclidean":
                    p.add_(d_p, alpha=-lr)
                else:
                    p.copy_(retraction(p, -lr * d_p, tag))


def sharpness_probe(params, loss_fn, rho: float, trials: int = 1, generator=None,
                    grad_norm_eps: float = 1e-12) -> float:
    """First-order estimate of the manifold sharpness ``max L(R(delta)) - L(theta)``.

    The gradient direction scaled to metric norm ``rho`` is always tried;
    ``trials - 1`` random tangent directions of the same norm are added and
    the maximum is returned. Parameters are restored bit-exactly.
    """
    if trials < 1:
        raise ContractViolation("trials must be >= 1")
    groups = list(params)
    if groups and not isinstance(groups[0], dict):
        groups = [{"params": groups}]
    tagged = [(p, _tag_of(g)) for g in groups for p in g["params"]]
    ps = [p for p, _ in tagged]
    backup = [p.detach().clone() for p in ps]

    with torch.enable_grad():
        base = loss_fn()
    _check_finite(base, "sharpness probe")
    if rho == 0:
        return 0.0
    grads = torch.autograd.grad(base, ps, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(ps, grads)]

    def directions():
        yield [riemannian_gradient(g, p, t) for g, (p, t) in zip(grads, tagged)]
        for _ in range(trials - 1):
            yield [riemannian_gradient(torch.randn(p.shape, generator=generator, dtype=p.dtype), p, t)
                   for p, t in tagged]

    best = None
    try:
        for dirs in directions():
            norm = math.sqrt(sum(float(metric_sqnorm(d, p, t)) for d, (p, t) in zip(dirs, tagged)))
            if norm < grad_norm_eps:
                value = 0.0
            else:
                with torch.no_grad():
                    for d, (p, t), old in zip(dirs, tagged, backup):
                        p.copy_(retraction(old, d * (rho / norm), t))
                    value = loss_fn()
                _check_finite(value, "sharpness probe")
                value = float(value) - float(base.detach())
            best = value if best is None else max(best, value)
    finally:
        with torch.no_grad():
            for p, old in zip(ps, backup):
                p.copy_(old)
    return best

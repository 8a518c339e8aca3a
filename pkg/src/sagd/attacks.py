"""l-infinity adversarial attacks: Jitter (training), PGD and FGSM (evaluation).

Every attack has the signature ``attack(x, y, model, cfg, generator=None)``
and returns an :class:`AdversarialBatch`. New attacks register themselves
with :func:`register_attack`.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import CapabilityError, ConfigError, ContractViolation, NonFiniteInput
from .model import forward_logits

EVAL_POLICIES = ("none", "id_only", "ood_only", "both")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    num_steps: int = 10
    jitter_alpha: float = 10.0
    jitter_sigma: float = 0.1
    jitter_beta: float = 2.0
    input_range: tuple = (0.0, 1.0)
    random_start: bool = True

    def __post_init__(self):
        # epsilon == 0 and beta == 1 are accepted as degenerate cases
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.step_size < 0 or self.step_size > self.epsilon:
            raise ConfigError("step_size must lie in [0, epsilon]")
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if self.jitter_beta < 1:
            raise ConfigError("jitter_beta must be >= 1")
        if self.jitter_sigma < 0:
            raise ConfigError("jitter_sigma must be >= 0")
        lo, hi = self.input_range
        if not lo < hi:
            raise ConfigError("input_range must satisfy low < high")
        object.__setattr__(self, "input_range", (float(lo), float(hi)))


@dataclass
class AdversarialBatch:
    """A batch and its perturbed twin.

    For classification attacks ``success_mask[i]`` is True when the model
    still predicts ``labels[i]`` on the perturbed input. For the OOD branch of
    :func:`attack_for_eval` it is True when the OOD score went down.
    """

    clean: torch.Tensor
    perturbed: torch.Tensor
    labels: torch.Tensor
    success_mask: torch.Tensor

    def linf(self) -> torch.Tensor:
        return (self.perturbed - self.clean).flatten(1).abs().amax(dim=1)


_REGISTRY = {}


def register_attack(name):
    def deco(fn):
        _REGISTRY[name] = fn
        return fn
    return deco


def get_attack(name):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown attack {name!r}; known: {sorted(_REGISTRY)}") from None


def rescale_softmax(h: torch.Tensor, alpha: float = 10.0) -> torch.Tensor:
    """``softmax(alpha * h / |h|_inf)`` along the last axis."""
    if not bool(torch.isfinite(h).all()):
        raise NonFiniteInput("rescale_softmax received non-finite logits")
    scale = h.abs().amax(dim=-1, keepdim=True) + 1e-12
    return torch.softmax(alpha * h / scale, dim=-1)


def jitter_loss(logits, y_onehot, sigma, beta, is_correct, noise=None, alpha=10.0):
    """Per-sample Jitter objective.

    ``|rescale_softmax(h) + sigma * noise - y|_2``, divided by ``beta`` where
    ``is_correct`` holds. ``noise`` is a standard-normal draw shaped like the
    logits; omitted means no noise.
    """
    h_hat = rescale_softmax(logits, alpha)
    if noise is not None and sigma > 0:
        h_hat = h_hat + sigma * noise
    diff = h_hat - y_onehot
    sq = (diff * diff).sum(dim=-1)
    dist = torch.where(sq > 0, sq.clamp_min(1e-300).sqrt(), torch.zeros_like(sq))
    is_correct = torch.as_tensor(is_correct, dtype=torch.bool)
    return torch.where(is_correct, dist / beta, dist)


def _project(x_adv, x, cfg: AttackConfig):
    lo, hi = cfg.input_range
    x_adv = torch.minimum(torch.maximum(x_adv, x - cfg.epsilon), x + cfg.epsilon)
    return x_adv.clamp(lo, hi)


def _input_grad(objective, x_adv):
    x_adv = x_adv.detach().requires_grad_(True)
    with torch.enable_grad():
        loss = objective(x_adv)
        if not loss.requires_grad:
            raise CapabilityError("model output does not depend differentiably on its input")
        (grad,) = torch.autograd.grad(loss, x_adv, allow_unused=True)
    if grad is None:
        raise CapabilityError("model provided no input gradient")
    return grad


def signed_gradient_attack(x, objective, cfg: AttackConfig, num_steps, step_size,
                           random_start=False, generator=None, ascend=True):
    """Iterated signed-gradient steps on ``objective`` within the epsilon ball.

    ``objective(x_adv)`` returns a scalar; ``ascend=False`` minimises it.
    """
    x = x.detach()
    x_adv = x.clone()
    if random_start and cfg.epsilon > 0:
        noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1
        x_adv = _project(x + cfg.epsilon * noise, x, cfg)
    sign = 1.0 if ascend else -1.0
    for step in range(num_steps):
        grad = _input_grad(lambda z: objective(z, step), x_adv)
        x_adv = _project(x_adv.detach() + sign * step_size * grad.sign(), x, cfg)
    return x_adv.detach()


def _predictions(model, x):
    with torch.no_grad():
        return forward_logits(model, x).argmax(dim=-1)


def _finish(x, x_adv, y, model):
    return AdversarialBatch(x.detach(), x_adv, y, _predictions(model, x_adv) == y)


@register_attack("jitter")
def generate_jitter(x, y, model, cfg: AttackConfig, generator=None):
    """Jitter attack: signed ascent on the noisy rescaled-softmax L2 gap.

    Correctness (for the beta branch) is re-evaluated on the current
    perturbed input at every step; noise is drawn per sample per step.
    """
    y = torch.as_tensor(y, dtype=torch.long)

    def objective(x_adv, step):
        logits = forward_logits(model, x_adv)
        onehot = F.one_hot(y, logits.shape[-1]).to(logits.dtype)
        correct = logits.detach().argmax(dim=-1) == y
        noise = None
        if cfg.jitter_sigma > 0:
            noise = torch.randn(logits.shape, generator=generator, dtype=logits.dtype)
        return jitter_loss(logits, onehot, cfg.jitter_sigma, cfg.jitter_beta, correct, noise,
                           cfg.jitter_alpha).sum()

    x_adv = signed_gradient_attack(x, objective, cfg, cfg.num_steps, cfg.step_size, generator=generator)
    return _finish(x, x_adv, y, model)


def _ce_objective(model, y):
    def objective(x_adv, step):
        return F.cross_entropy(forward_logits(model, x_adv), y, reduction="sum")
    return objective


@register_attack("pgd")
def generate_pgd(x, y, model, cfg: AttackConfig, generator=None):
    """l-infinity PGD on cross-entropy, uniform random start when ``cfg.random_start``."""
    y = torch.as_tensor(y, dtype=torch.long)
    x_adv = signed_gradient_attack(x, _ce_objective(model, y), cfg, cfg.num_steps, cfg.step_size,
                                   random_start=cfg.random_start, generator=generator)
    return _finish(x, x_adv, y, model)


@register_attack("fgsm")
def generate_fgsm(x, y, model, cfg: AttackConfig, generator=None):
    y = torch.as_tensor(y, dtype=torch.long)
    x_adv = signed_gradient_attack(x, _ce_objective(model, y), cfg, 1, cfg.epsilon)
    return _finish(x, x_adv, y, model)


def _schedule(name, cfg: AttackConfig):
    """(steps, step size, random start) used by the named attack."""
    if name == "fgsm":
        return 1, cfg.epsilon, False
    if name == "pgd":
        return cfg.num_steps, cfg.step_size, cfg.random_start
    return cfg.num_steps, cfg.step_size, False


def attack_ood_scores(x, model, scorer, cfg: AttackConfig, name="pgd", generator=None):
    """Push outliers toward the ID region by descending their OOD score."""
    steps, step_size, random_start = _schedule(name, cfg)

    def objective(x_adv, step):
        return scorer(model.embed_for_scoring(x_adv)).sum()

    x_adv = signed_gradient_attack(x, objective, cfg, steps, step_size, random_start,
                                   generator=generator, ascend=False)
    with torch.no_grad():
        lowered = scorer(model.embed_for_scoring(x_adv)) < scorer(model.embed_for_scoring(x))
    labels = torch.full((x.shape[0],), -1, dtype=torch.long)
    return AdversarialBatch(x.detach(), x_adv, labels, lowered)


def _unperturbed(x, y, model):
    x = x.detach()
    if y is None:
        return AdversarialBatch(x, x.clone(), torch.full((x.shape[0],), -1, dtype=torch.long),
                                torch.zeros(x.shape[0], dtype=torch.bool))
    y = torch.as_tensor(y, dtype=torch.long)
    return AdversarialBatch(x, x.clone(), y, _predictions(model, x) == y)


def attack_for_eval(id_batch, ood_batch, model, scorer, cfg: AttackConfig, policy="both",
                    attack="pgd", generator=None):
    """Attack inliers (classification objective) and/or outliers (score descent).

    ``id_batch`` is ``(x, y)``; ``ood_batch`` is ``x``. Returns the ID and
    OOD :class:`AdversarialBatch` pair.
    """
    if policy not in EVAL_POLICIES:
        raise ConfigError(f"unknown eval policy {policy!r}; expected one of {EVAL_POLICIES}")
    x_id, y_id = id_batch
    if attack == "none" or policy == "none":
        return _unperturbed(x_id, y_id, model), _unperturbed(ood_batch, None, model)
    fn = get_attack(attack)
    if policy in ("id_only", "both"):
        adv_id = fn(x_id, y_id, model, cfg, generator=generator)
    else:
        adv_id = _unperturbed(x_id, y_id, model)
    if policy in ("ood_only", "both"):
        adv_ood = attack_ood_scores(ood_batch, model, scorer, cfg, attack, generator=generator)
    else:
        adv_ood = _unperturbed(ood_batch, None, model)
    return adv_id, adv_ood

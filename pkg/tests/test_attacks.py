import math

import pytest
import torch
import torch.nn.functional as F
from torch import nn

from sagd.attacks import (
    AttackConfig,
    attack_for_eval,
    generate_fgsm,
    generate_jitter,
    generate_pgd,
    get_attack,
    jitter_loss,
    rescale_softmax,
    signed_gradient_attack,
)
from sagd.data import ToyDatasetSpec, generate_toy
from sagd.errors import CapabilityError, ConfigError, ContractViolation
from sagd.model import BackboneConfig, MGPNet
from sagd.scoring import EmbeddingBank, KNNScorer

T = torch.float64


@pytest.fixture(scope="module")
def toy():
    tr, te, ood = generate_toy(ToyDatasetSpec(samples_per_class=100, test_per_class=50, seed=7))
    torch.manual_seed(0)
    model = MGPNet(BackboneConfig(input_shape=(16,), hidden_dim=32, embed_dim=8)).double()
    x, y = tr.tensors()
    opt = torch.optim.SGD(model.parameters(), lr=0.05, momentum=0.9)
    for _ in range(150):
        opt.zero_grad()
        F.cross_entropy(model(x).logits, y).backward()
        opt.step()
    model.eval()
    return model, tr, te, ood


def cfg(**kw):
    base = dict(epsilon=0.5, step_size=0.125, num_steps=5, input_range=(-20.0, 20.0))
    base.update(kw)
    return AttackConfig(**base)


def test_rescale_softmax_values(gen):
    h = torch.tensor([1.0, 0.0], dtype=T)
    p = rescale_softmax(h, 10.0)
    assert abs(p[0].item() - 1 / (1 + math.exp(-10))) < 1e-12
    assert abs(p[1].item() - math.exp(-10) / (1 + math.exp(-10))) < 1e-12
    assert torch.allclose(rescale_softmax(torch.full((5,), -3.0, dtype=T)), torch.full((5,), 0.2, dtype=T))
    h = torch.randn(100, 6, generator=gen, dtype=T)
    assert (rescale_softmax(h) - rescale_softmax(h * 7.3)).abs().max() < 1e-9
    assert (rescale_softmax(h).sum(dim=1) - 1).abs().max() < 1e-9
    zero = rescale_softmax(torch.zeros(3, dtype=T))
    assert torch.allclose(zero, torch.full((3,), 1 / 3, dtype=T))
    with pytest.raises(ContractViolation):
        rescale_softmax(torch.tensor([float("inf"), 0.0]))


def test_jitter_loss_branches():
    y = torch.tensor([[1.0, 0.0]], dtype=T)
    # alpha large enough that the rescaled softmax is exactly one-hot
    exact = jitter_loss(torch.tensor([[1.0, -1.0]], dtype=T), y, 0.0, 2.0, torch.tensor([False]), alpha=2000.0)
    assert exact.item() == 0.0
    # construct |h_hat - y| = 0.5 from equal logits over two classes: h_hat = (0.5, 0.5)
    half = jitter_loss(torch.zeros(1, 2, dtype=T), y, 0.0, 2.0, torch.tensor([True])).item()
    assert abs(half - math.sqrt(0.5) / 2) < 1e-12
    flat = torch.tensor([[1.0, 0.0]], dtype=T)
    want = math.sqrt(2) * math.exp(-10) / (1 + math.exp(-10))
    assert abs(jitter_loss(flat, y, 0.0, 2.0, torch.tensor([False])).item() - want) < 1e-15
    assert abs(want - 6.42e-5) < 1e-7
    noise = torch.tensor([[0.3, -0.4]], dtype=T)
    got = jitter_loss(flat, y, 0.5, 2.0, torch.tensor([True]), noise).item()
    h_hat = rescale_softmax(flat)
    assert abs(got - (h_hat + 0.5 * noise - y).norm().item() / 2) < 1e-15


def test_jitter_loss_half_norm_example():
    # |h_hat - y| = 0.5 on the correct branch with beta = 2 gives 0.25
    y = torch.tensor([[1.0, 0.0, 0.0]], dtype=T)
    h = torch.tensor([[1.0, 0.0, 0.0]], dtype=T)
    # the rescale removes logit scale, so solve for alpha by bisection
    lo, hi = 0.0, 20.0
    for _ in range(200):
        a = (lo + hi) / 2
        d = (rescale_softmax(h, alpha=a) - y).norm().item()
        lo, hi = (a, hi) if d > 0.5 else (lo, a)
    assert abs((rescale_softmax(h, alpha=a) - y).norm().item() - 0.5) < 1e-12
    val = jitter_loss(h, y, 0.0, 2.0, torch.tensor([True]), alpha=a).item()
    assert abs(val - 0.25) < 1e-9


def test_config_validation():
    for kw in ({"epsilon": -1.0}, {"step_size": 1.0}, {"num_steps": 0}, {"jitter_beta": 0.5},
               {"input_range": (1.0, 0.0)}, {"jitter_sigma": -0.1}):
        with pytest.raises(ConfigError):
            AttackConfig(**kw)
    with pytest.raises(ConfigError):
        get_attack("cw")


@pytest.mark.parametrize("fn", [generate_jitter, generate_pgd, generate_fgsm])
def test_epsilon_ball_and_range(fn, toy):
    model, _, te, _ = toy
    x, y = te.tensors()
    c = cfg(input_range=(-3.0, 3.0))
    x = x.clamp(-3, 3)
    adv = fn(x, y, model, c, generator=torch.Generator().manual_seed(0))
    assert bool((adv.linf() <= c.epsilon + 1e-6).all())
    assert adv.perturbed.min() >= -3 and adv.perturbed.max() <= 3


@pytest.mark.parametrize("fn", [generate_jitter, generate_pgd, generate_fgsm])
def test_zero_epsilon_is_identity(fn, toy):
    model, _, te, _ = toy
    x, y = te.tensors()
    adv = fn(x, y, model, cfg(epsilon=0.0, step_size=0.0), generator=torch.Generator().manual_seed(0))
    assert torch.equal(adv.perturbed, x)


def test_fgsm_equals_one_step_pgd(toy):
    model, _, te, _ = toy
    x, y = te.tensors()
    c = cfg()
    fg = generate_fgsm(x, y, model, c)
    pg = generate_pgd(x, y, model, cfg(num_steps=1, step_size=c.epsilon, random_start=False))
    assert torch.equal(fg.perturbed, pg.perturbed)
    gamma = (fg.perturbed - x).abs()
    assert bool(((gamma == 0) | ((gamma - c.epsilon).abs() < 1e-12)).all())
    # one PGD step without random start is FGSM at step_size
    small = generate_pgd(x, y, model, cfg(num_steps=1, random_start=False))
    assert torch.allclose((small.perturbed - x).abs().amax(dim=1), torch.full((len(y),), 0.125, dtype=T))


def test_zero_gradient_fgsm_is_identity():
    class Flat(nn.Module):
        def __init__(self):
            super().__init__()
            self.w = nn.Parameter(torch.zeros(2, 3, dtype=T))
            self.b = nn.Parameter(torch.tensor([1.0, 0.0], dtype=T))

        def forward(self, x):
            return x @ self.w.T + self.b

    x = torch.randn(4, 3, dtype=T)
    adv = generate_fgsm(x, torch.zeros(4, dtype=torch.long), Flat(), cfg())
    assert torch.equal(adv.perturbed, x)


def test_attacks_increase_loss_and_reduce_accuracy(toy):
    model, _, te, _ = toy
    x, y = te.tensors()
    with torch.no_grad():
        clean_loss = F.cross_entropy(model(x).logits, y).item()
        clean_acc = (model(x).logits.argmax(1) == y).double().mean().item()
    for fn in (generate_pgd, generate_fgsm, generate_jitter):
        adv = fn(x, y, model, cfg(), generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            assert F.cross_entropy(model(adv.perturbed).logits, y).item() >= clean_loss
        assert adv.success_mask.double().mean().item() <= clean_acc


def test_determinism(toy):
    model, _, te, _ = toy
    x, y = te.tensors()
    a = generate_jitter(x, y, model, cfg(), generator=torch.Generator().manual_seed(3))
    b = generate_jitter(x, y, model, cfg(), generator=torch.Generator().manual_seed(3))
    assert torch.equal(a.perturbed, b.perturbed)
    a = generate_pgd(x, y, model, cfg(), generator=torch.Generator().manual_seed(3))
    b = generate_pgd(x, y, model, cfg(), generator=torch.Generator().manual_seed(3))
    assert torch.equal(a.perturbed, b.perturbed)


def test_jitter_branchless_reduction(toy):
    # sigma = 0 and beta = 1: identical to plain signed ascent on |h_hat - y|
    model, _, te, _ = toy
    x, y = te.tensors()
    c = cfg(jitter_sigma=0.0, jitter_beta=1.0)
    got = generate_jitter(x, y, model, c).perturbed
    onehot = F.one_hot(y, 4).to(T)

    def plain(x_adv, step):
        p = rescale_softmax(model(x_adv).logits, c.jitter_alpha)
        return (p - onehot).norm(dim=1).sum()

    want = signed_gradient_attack(x, plain, c, c.num_steps, c.step_size)
    assert torch.equal(got, want)


def test_jitter_single_step_structure(toy):
    model, _, te, _ = toy
    x, y = te.tensors()
    c = cfg(num_steps=1, jitter_sigma=0.0)
    adv = generate_jitter(x, y, model, c)
    gamma = (adv.perturbed - x).abs().amax(dim=1)
    assert torch.allclose(gamma, torch.full_like(gamma, c.step_size))


def test_capability_error_without_input_gradient():
    class Detached(nn.Module):
        def forward(self, x):
            return torch.zeros(x.shape[0], 2, dtype=x.dtype)

    with pytest.raises(CapabilityError):
        generate_pgd(torch.zeros(2, 3, dtype=T), torch.zeros(2, dtype=torch.long), Detached(), cfg())


def test_attack_for_eval_policies(toy):
    model, tr, te, ood = toy
    with torch.no_grad():
        bank = EmbeddingBank(model.embed_for_scoring(tr.tensors()[0]), tr.tensors()[1])
    scorer = KNNScorer(bank, 5)
    x, y = te.tensors()
    xo = ood.tensors()[0]
    c = cfg()
    a, b = attack_for_eval((x, y), xo, model, scorer, c, "none")
    assert torch.equal(a.perturbed, x) and torch.equal(b.perturbed, xo)
    a, b = attack_for_eval((x, y), xo, model, scorer, c, "id_only", generator=torch.Generator().manual_seed(0))
    assert torch.equal(b.perturbed, xo) and not torch.equal(a.perturbed, x)
    a, b = attack_for_eval((x, y), xo, model, scorer, c, "ood_only", generator=torch.Generator().manual_seed(0))
    assert torch.equal(a.perturbed, x) and not torch.equal(b.perturbed, xo)
    a, b = attack_for_eval((x, y), xo, model, scorer, c, "both", generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        s_clean = scorer(model.embed_for_scoring(xo)).mean().item()
        s_adv = scorer(model.embed_for_scoring(b.perturbed)).mean().item()
        acc_clean = (model(x).logits.argmax(1) == y).double().mean().item()
    assert s_adv <= s_clean
    assert a.success_mask.double().mean().item() <= acc_clean
    assert bool((b.linf() <= c.epsilon + 1e-6).all())
    with pytest.raises(ConfigError):
        attack_for_eval((x, y), xo, model, scorer, c, "sometimes")

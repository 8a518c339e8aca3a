"""Independent reference implementations used as test oracles.

They are deliberately naive (loops, pure Python, float64 numpy) and share no
code with the package.
"""

import math

import numpy as np
import torch


def fd_relative_error(fn, x, h=1e-5):
    """Relative L2 error between autograd and central finite differences of scalar ``fn`` at ``x``."""
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    flat = x.detach().clone().reshape(-1)
    fd = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = fn(flat.reshape(x.shape)).item()
            flat[i] = old - h
            down = fn(flat.reshape(x.shape)).item()
            flat[i] = old
            fd[i] = (up - down) / (2 * h)
    fd = fd.reshape(x.shape)
    return ((g - fd).norm() / fd.norm().clamp_min(1e-12)).item()


def auroc_pairs(id_scores, ood_scores):
    """P(ood > id) + 0.5 P(tie), counting every pair."""
    wins = 0.0
    for o in ood_scores:
        for i in id_scores:
            wins += 1.0 if o > i else 0.5 if o == i else 0.0
    return wins / (len(id_scores) * len(ood_scores))


def fpr_at_tpr_sweep(id_scores, ood_scores, target=0.95):
    """Try every candidate threshold (each observed score and -inf); keep the largest with TPR >= target.

    Detection rule: OOD iff score > threshold.
    """
    cands = sorted(set(list(id_scores) + list(ood_scores)) | {-math.inf}, reverse=True)
    for t in cands:
        tpr = sum(1 for s in ood_scores if s > t) / len(ood_scores)
        if tpr >= target:
            return sum(1 for s in id_scores if s > t) / len(id_scores)
    return 1.0


def knn_bruteforce(z, bank, k):
    out = []
    for q in z:
        d = sorted(math.sqrt(sum((a - b) * (a - b) for a, b in zip(q, row))) for row in bank)
        out.append(d[k - 1])
    return np.array(out)


def mahalanobis_bruteforce(z, bank, labels, ridge):
    bank = np.asarray(bank, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    means = {k: bank[labels == k].mean(axis=0) for k in classes}
    centred = np.stack([bank[i] - means[labels[i]] for i in range(len(bank))])
    cov = centred.T @ centred / len(bank) + ridge * np.eye(bank.shape[1])
    prec = np.linalg.inv(cov)
    prec = (prec + prec.T) / 2
    out = []
    for q in np.asarray(z, dtype=np.float64):
        out.append(max(0.0, min(float((q - m) @ prec @ (q - m)) for m in means.values())))
    return np.array(out)

import json

import numpy as np
import pytest
import torch

from sagd.attacks import AttackConfig
from sagd.errors import ContractViolation
from sagd.evaluation import (
    EvalReport,
    EvalRow,
    ScoreSet,
    adversarial_auc_variants,
    auroc,
    emit_histograms,
    emit_report,
    fpr_at_tpr,
    histogram_table,
    load_report,
    read_histogram_sidecar,
    roc_curve,
)
from sagd.model import BackboneConfig, MGPNet
from sagd.scoring import EmbeddingBank, KNNScorer

from oracles import auroc_pairs, fpr_at_tpr_sweep


def random_sets(rng, n_max=200, ties=False):
    n_id, n_ood = rng.integers(1, n_max + 1, size=2)
    if ties:
        return rng.integers(0, 6, n_id).astype(float), rng.integers(0, 6, n_ood).astype(float)
    return rng.normal(size=n_id), rng.normal(0.7, 1.0, size=n_ood)


def test_auroc_simple_cases():
    assert auroc([0.0, 1.0], [2.0, 3.0]) == 1.0
    assert auroc([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.5
    assert auroc([2.0, 3.0], [0.0, 1.0]) == 0.0
    with pytest.raises(ContractViolation):
        auroc([], [1.0])
    with pytest.raises(ContractViolation):
        auroc([np.nan], [1.0])


@pytest.mark.parametrize("ties", [False, True])
def test_metrics_match_bruteforce(ties):
    rng = np.random.default_rng(11 + ties)
    for _ in range(50):
        ids, ood = random_sets(rng, ties=ties)
        assert auroc(ids, ood) == auroc_pairs(ids, ood)
        for t in (0.95, 0.5, 1.0):
            assert fpr_at_tpr(ids, t, ood) == fpr_at_tpr_sweep(ids, ood, t)


def test_auroc_symmetry_and_invariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        ids, ood = random_sets(rng, ties=True)
        assert abs(auroc(ids, ood) + auroc(ood, ids) - 1) < 1e-12
        assert auroc(np.exp(ids), np.exp(ood)) == auroc(ids, ood)


def test_fpr_properties():
    assert fpr_at_tpr([0.0, 1.0], 0.95, [5.0, 6.0]) == 0.0
    same = np.arange(20.0)
    assert fpr_at_tpr(same, 0.95, same) >= 0.95
    rng = np.random.default_rng(5)
    ids, ood = random_sets(rng)
    vals = [fpr_at_tpr(ids, t, ood) for t in np.linspace(1.0, 0.05, 20)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ContractViolation):
        fpr_at_tpr(ids, 0.0, ood)


def test_roc_curve_shape():
    rng = np.random.default_rng(9)
    ids, ood = random_sets(rng, ties=True)
    r = roc_curve(ids, ood)
    assert r.tpr[0] == 0.0 and r.fpr[0] == 0.0 and r.tpr[-1] == 1.0 and r.fpr[-1] == 1.0
    assert (np.diff(r.tpr) >= 0).all() and (np.diff(r.fpr) >= 0).all()
    assert r.auroc == auroc(ids, ood)
    # trapezoid area under the exact step curve equals the Mann-Whitney value
    assert abs(np.trapezoid(r.tpr, r.fpr) - r.auroc) < 1e-12


def _row(cond, auc, seed=0):
    return EvalRow(cond, cond, 1 - auc, auc, auc + 0.01, auc - 0.01, 10, 12, seed)


def test_report_aggregate_and_roundtrip(tmp_path):
    rep = EvalReport([_row("none", 0.9), _row("pgd", 0.3), _row("jitter", 0.5)])
    agg = rep.aggregate()
    assert abs(agg.auc - np.mean([0.9, 0.3, 0.5])) < 1e-9
    assert abs(agg.fpr95 - np.mean([0.1, 0.7, 0.5])) < 1e-9
    single = EvalReport([_row("none", 0.8)]).aggregate()
    assert single.auc == 0.8 and single.fpr95 == _row("none", 0.8).fpr95
    for name in ("r.csv", "r.json"):
        p = tmp_path / name
        emit_report(rep, p)
        back = load_report(p)
        assert back.rows == rep.rows
        first = p.read_bytes()
        emit_report(back, p)
        assert p.read_bytes() == first
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == "condition,attack,fpr95,auc,auc_in,auc_out,n_id,n_ood,seed"
    assert json.loads((tmp_path / "r.json").read_text())


def test_histograms(tmp_path):
    rng = np.random.default_rng(0)
    ids = rng.normal(size=300)
    disjoint = ScoreSet(ids, ids.max() + 1 + rng.random(200))
    assert histogram_table(disjoint, 20)[3] == 0.0
    overlaps = [histogram_table(ScoreSet(ids, ids[:200] + shift), 30)[3] for shift in (0.0, 1.0, 2.0)]
    assert overlaps[0] > overlaps[1] > overlaps[2]
    paths = emit_histograms({"none": disjoint, "pgd": ScoreSet(ids, ids + 0.5)}, tmp_path / "h", bins=20)
    assert len(paths) >= 2
    overlap, rows = read_histogram_sidecar(tmp_path / "h" / "hist_none.txt")
    assert overlap == 0.0 and len(rows) == 20
    again = emit_histograms({"none": disjoint}, tmp_path / "h2", bins=20)
    assert (tmp_path / "h2" / "hist_none.txt").read_bytes() == (tmp_path / "h" / "hist_none.txt").read_bytes()
    assert again


def test_adversarial_variants_none_equal_clean():
    torch.manual_seed(0)
    model = MGPNet(BackboneConfig(input_shape=(4,), hidden_dim=16, embed_dim=4)).double().eval()
    gen = torch.Generator().manual_seed(0)
    x_tr = torch.randn(40, 4, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        bank = EmbeddingBank(model.embed_for_scoring(x_tr), torch.arange(40) % 4)
    x_id = torch.randn(20, 4, generator=gen, dtype=torch.float64)
    y_id = torch.arange(20) % 4
    x_ood = torch.randn(15, 4, generator=gen, dtype=torch.float64) + 2
    cfg = AttackConfig(epsilon=0.3, step_size=0.1, num_steps=3, input_range=(-10.0, 10.0))
    res = adversarial_auc_variants(model, KNNScorer(bank, 2), (x_id, y_id), x_ood, cfg, "none")
    assert res["auc"] == res["auc_in"] == res["auc_out"] == res["clean_auc"]
    res = adversarial_auc_variants(model, KNNScorer(bank, 2), (x_id, y_id), x_ood, cfg, "pgd",
                                   torch.Generator().manual_seed(1), batch_size=7)
    assert res["scores"]["attacked_id"].shape == (20,)
    assert res["scores"]["attacked_ood"].mean() <= res["scores"]["clean_ood"].mean()

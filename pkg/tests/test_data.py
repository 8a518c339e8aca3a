import pickle

import numpy as np
import pytest
import torch
from PIL import Image

from sagd.data import (
    AugmentationSpec,
    ToyDatasetSpec,
    class_means,
    convert_dataset,
    generate_toy,
    load_image_dataset,
    make_contrastive_views,
    ood_direction,
    read_packed,
)
from sagd.errors import ConfigError, IngestionError
from sagd.evaluation import auroc
from sagd.scoring import EmbeddingBank, fit_gaussian, knn_score, mahalanobis_score


def test_toy_is_deterministic():
    a, b = generate_toy(ToyDatasetSpec(seed=3)), generate_toy(ToyDatasetSpec(seed=3))
    for s, t in zip(a, b):
        assert np.array_equal(s.x, t.x) and np.array_equal(s.y, t.y)
    c = generate_toy(ToyDatasetSpec(seed=4))
    assert not np.array_equal(a[0].x, c[0].x)


def test_toy_shapes_and_labels():
    spec = ToyDatasetSpec(samples_per_class=50, test_per_class=20)
    tr, te, ood = generate_toy(spec)
    assert tr.x.shape == (200, 16) and te.x.shape == (80, 16) and ood.x.shape == (80, 16)
    assert np.bincount(tr.y).tolist() == [50] * 4
    assert (ood.y == -1).all()
    assert abs(np.linalg.norm(ood_direction(spec)) - 1) < 1e-12
    m = class_means(spec)
    d = np.linalg.norm(m[:, None] - m[None], axis=-1)
    assert np.allclose(d[~np.eye(4, dtype=bool)], 6.0)
    m2 = class_means(ToyDatasetSpec(dim=2))
    assert np.allclose(np.linalg.norm(m2[0] - m2[1]), 6.0)


def test_toy_moments_match_declared_family():
    spec = ToyDatasetSpec(samples_per_class=2000, test_per_class=2000, seed=1)
    tr, _, ood = generate_toy(spec)
    means = class_means(spec)
    se = spec.noise_std / np.sqrt(2000)
    for k in range(4):
        xk = tr.x[tr.y == k]
        assert (np.abs(xk.mean(0) - means[k]) < 3 * se).all()
        var_se = spec.noise_std**2 * np.sqrt(2 / 1999)
        assert (np.abs(xk.var(0, ddof=1) - spec.noise_std**2) < 3 * var_se).all()
    shifted = ood.x.mean(0) - tr.x.mean(0)
    assert np.allclose(shifted, spec.ood_shift * ood_direction(spec), atol=0.1)


def test_wide_separation_is_linearly_separable():
    tr, _, _ = generate_toy(ToyDatasetSpec(class_separation=10.0, seed=2))
    x = torch.as_tensor(tr.x)
    y = torch.as_tensor(tr.y)
    w = torch.zeros(16, 4, dtype=torch.float64, requires_grad=True)
    b = torch.zeros(4, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([w, b], max_iter=200)

    def closure():
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(x @ w + b, y)
        loss.backward()
        return loss

    opt.step(closure)
    acc = ((x @ w + b).argmax(1) == y).double().mean().item()
    assert acc >= 0.99


def test_zero_shift_is_indistinguishable():
    spec = ToyDatasetSpec(ood_shift=0.0, samples_per_class=200, test_per_class=200, seed=5)
    tr, te, ood = generate_toy(spec)
    unit = lambda a: torch.nn.functional.normalize(torch.as_tensor(a), dim=1)
    bank = EmbeddingBank(unit(tr.x), torch.as_tensor(tr.y))
    knn = auroc(knn_score(unit(te.x), bank, 8).numpy(), knn_score(unit(ood.x), bank, 8).numpy())
    stats = fit_gaussian(bank)
    maha = auroc(mahalanobis_score(unit(te.x), stats).numpy(), mahalanobis_score(unit(ood.x), stats).numpy())
    assert abs(knn - 0.5) < 0.05 and abs(maha - 0.5) < 0.05


def test_toy_spec_validation():
    for kw in ({"samples_per_class": 5}, {"class_separation": 0.0}, {"kind": "moons"}, {"num_classes": 1}):
        with pytest.raises(ConfigError):
            ToyDatasetSpec(**kw)


def test_rings_kind():
    tr, _, _ = generate_toy(ToyDatasetSpec(kind="rings", dim=4))
    r = np.linalg.norm(tr.x[:, :2], axis=1)
    for k in range(4):
        assert abs(np.median(r[tr.y == k]) - (k + 1) * 6.0) < 0.5


def test_contrastive_views():
    x = torch.randn(6, 16, dtype=torch.float64)
    y = torch.tensor([0, 1, 0, 2, 1, 0])
    xf, yf, pos, cand = make_contrastive_views(x, y, AugmentationSpec(views_per_sample=2))
    assert xf.shape[0] == 18 and torch.equal(yf[:6], y) and torch.equal(yf[6:12], y)
    assert cand == list(range(6, 18))
    for i, ps in pos.items():
        assert i not in ps and ps and all(yf[p] == yf[i] for p in ps)
        assert sorted(ps) == [j for j in range(18) if j != i and yf[j] == yf[i]]
    same, _, _, _ = make_contrastive_views(x, y, AugmentationSpec(identity=True))
    assert torch.equal(same[6:], x)
    a = make_contrastive_views(x, y, AugmentationSpec(seed=9))[0]
    b = make_contrastive_views(x, y, AugmentationSpec(seed=9))[0]
    assert torch.equal(a, b)
    with pytest.raises(ConfigError):
        AugmentationSpec(views_per_sample=0)


def test_image_views_stay_in_range():
    x = torch.rand(4, 3, 8, 8, dtype=torch.float64)
    xf, _, _, _ = make_contrastive_views(x, torch.arange(4), AugmentationSpec(input_range=(0.0, 1.0)))
    assert xf.shape == (8, 3, 8, 8) and xf.min() >= 0 and xf.max() <= 1


@pytest.fixture
def image_tree(tmp_path):
    root = tmp_path / "tree"
    rng = np.random.default_rng(0)
    for k, name in enumerate(["cat", "dog"]):
        (root / name).mkdir(parents=True)
        for i in range(5):
            arr = rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)
            Image.fromarray(arr).save(root / name / f"{i}.png")
    return root


def test_image_tree_loading(image_tree):
    batches = list(load_image_dataset(image_tree, batch_size=4, seed=1, input_range=(-1.0, 1.0)))
    xs = torch.cat([b[0] for b in batches])
    ys = torch.cat([b[1] for b in batches])
    assert xs.shape == (10, 3, 6, 6) and sorted(ys.tolist()) == [0] * 5 + [1] * 5
    assert xs.min() >= -1 and xs.max() <= 1
    again = torch.cat([b[1] for b in load_image_dataset(image_tree, batch_size=4, seed=1)])
    assert torch.equal(ys, again)


def test_convert_tree_and_cifar(image_tree, tmp_path):
    packed = tmp_path / "tree.bin"
    assert convert_dataset(image_tree, packed) == 10
    images, labels = read_packed(packed)
    assert images.shape == (10, 6, 6, 3) and labels.tolist() == [0] * 5 + [1] * 5
    assert packed.read_bytes()[:4] == b"SGDI"
    assert torch.cat([b[1] for b in load_image_dataset(packed, shuffle=False)]).tolist() == labels.tolist()

    rng = np.random.default_rng(1)
    cifar = tmp_path / "cifar"
    cifar.mkdir()
    for j in (1, 2):
        batch = {b"data": rng.integers(0, 256, (3, 3072), dtype=np.uint8), b"labels": [j, 0, 9]}
        with open(cifar / f"data_batch_{j}", "wb") as fh:
            pickle.dump(batch, fh)
    assert convert_dataset(cifar, tmp_path / "c.bin") == 6
    imgs, labs = read_packed(tmp_path / "c.bin")
    assert imgs.shape == (6, 32, 32, 3) and labs.tolist() == [1, 0, 9, 2, 0, 9]


def test_ingestion_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope")
    with pytest.raises(IngestionError) as info:
        read_packed(bad)
    assert info.value.path == bad
    with pytest.raises(IngestionError):
        list(load_image_dataset(tmp_path / "missing"))
    (tmp_path / "empty").mkdir()
    with pytest.raises(IngestionError):
        list(load_image_dataset(tmp_path / "empty"))
    (tmp_path / "corrupt" / "a").mkdir(parents=True)
    (tmp_path / "corrupt" / "a" / "x.png").write_bytes(b"not a png")
    with pytest.raises(IngestionError):
        list(load_image_dataset(tmp_path / "corrupt"))

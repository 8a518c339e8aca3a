"""Training, evaluation, sharpness probing and bank export for one experiment."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attacks import AttackConfig, generate_jitter
from .config import ExperimentConfig, dump_config
from .data import AugmentationSpec, Split, ToyDatasetSpec, generate_toy, load_image_dataset, make_contrastive_views
from .errors import ConfigError, DivergenceError, IngestionError, NonFiniteInput
from .evaluation import EvalReport, EvalRow, ScoreSet, adversarial_auc_variants, auroc, emit_histograms, emit_report, fpr_at_tpr
from .geometry import BallConfig
from .losses import ContrastiveBatch, LossConfig, PrototypeBank, total_loss, update_prototypes
from .model import BackboneConfig, MGPNet
from .optim import RSAM, RSAMConfig, sharpness_probe
from .scoring import EmbeddingBank, make_scorer, save_bank

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_DTYPES = {"float64": torch.float64, "float32": torch.float32}


def _dtype(cfg: ExperimentConfig):
    try:
        return _DTYPES[cfg.model.dtype]
    except KeyError:
        raise ConfigError(f"unknown dtype {cfg.model.dtype!r}") from None


# ---------------------------------------------------------------- builders

def attack_config(cfg: ExperimentConfig) -> AttackConfig:
    a = cfg.attack
    return AttackConfig(epsilon=a.epsilon, step_size=a.step_size, num_steps=a.steps,
                        jitter_alpha=a.jitter.alpha, jitter_sigma=a.jitter.sigma, jitter_beta=a.jitter.beta,
                        input_range=tuple(a.input_range), random_start=a.random_start)


def backbone_config(cfg: ExperimentConfig, input_shape) -> BackboneConfig:
    m = cfg.model
    return BackboneConfig(architecture=m.architecture, input_shape=tuple(input_shape), embed_dim=m.embed_dim,
                          num_classes=cfg.data.num_classes, hidden_dim=m.hidden_dim,
                          ball=BallConfig(curvature=m.curvature, clip_radius=m.clip_radius))


def loss_config(cfg: ExperimentConfig) -> LossConfig:
    s = cfg.loss
    return LossConfig(hyperbolic_temperature=s.hyperbolic_temperature, hyperbolic_reduction=s.hyperbolic_reduction,
                      weight_hypersphere=s.weight_hypersphere, weight_hyperbolic=s.weight_hyperbolic,
                      weight_ce=s.weight_ce,
                      ball=BallConfig(curvature=cfg.model.curvature, clip_radius=cfg.model.clip_radius))


def rsam_config(cfg: ExperimentConfig) -> RSAMConfig:
    o = cfg.optim
    return RSAMConfig(rho=o.rho, lr=o.lr, momentum=o.momentum, weight_decay=o.weight_decay, radius_mode=o.radius_mode)


def augmentation(cfg: ExperimentConfig, seed: int) -> AugmentationSpec:
    rng = tuple(cfg.attack.input_range)
    return AugmentationSpec(views_per_sample=cfg.data.views_per_sample, gaussian_std=cfg.data.augment_std,
                            input_range=rng, seed=seed)


@dataclass
class Datasets:
    train: Split
    test: Split
    ood: Split

    @property
    def input_shape(self):
        return self.train.x.shape[1:]


def _load_images(root, split, cfg):
    xs, ys = [], []
    for x, y in load_image_dataset(root, split, batch_size=4096, seed=cfg.seed, shuffle=False,
                                   input_range=tuple(cfg.attack.input_range)):
        xs.append(x.numpy())
        ys.append(y.numpy())
    return Split(np.concatenate(xs), np.concatenate(ys))


def load_datasets(cfg: ExperimentConfig) -> Datasets:
    d = cfg.data
    if d.source == "toy":
        spec = ToyDatasetSpec(kind=d.kind, num_classes=d.num_classes, dim=d.dim,
                              samples_per_class=d.samples_per_class, test_per_class=d.test_per_class,
                              class_separation=d.class_separation, ood_shift=d.ood_shift,
                              noise_std=d.noise_std, seed=cfg.seed)
        return Datasets(*generate_toy(spec))
    if d.source == "images":
        if not d.image_root or not d.ood_root:
            raise ConfigError("image data needs data.image_root and data.ood_root")
        train = _load_images(d.image_root, "train", cfg)
        test = _load_images(d.image_root, "test", cfg)
        ood = _load_images(d.ood_root, "test", cfg)
        ood.y[:] = -1
        return Datasets(train, test, ood)
    raise ConfigError(f"unknown data source {d.source!r}")


# ---------------------------------------------------------------- checkpoints

def _atomic_write(path: Path, writer):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: MGPNet, bank: PrototypeBank, seed: int, extra=None):
    """Single ``.npz`` archive: named parameter arrays, prototypes and a JSON meta record."""
    arrays = {f"state/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["prototypes"] = bank.prototypes.detach().cpu().numpy()
    bc = model.cfg
    meta = {
        "version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "backbone": {**asdict(bc), "input_shape": list(bc.input_shape)},
        "bank": {"temperature": bank.temperature, "ema_factor": bank.ema_factor},
        "seed": seed,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        **(extra or {}),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)

    def write(tmp):
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)

    try:
        _atomic_write(Path(path), write)
    except OSError as exc:
        raise IngestionError(f"cannot write checkpoint ({exc.strerror})", path) from exc


def load_checkpoint(path):
    """Return ``(model, bank, meta)``."""
    path = Path(path)
    try:
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise IngestionError("cannot read checkpoint", path) from exc
    if "meta" not in arrays:
        raise IngestionError("checkpoint has no meta record", path)
    meta = json.loads(arrays["meta"].tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise IngestionError(f"unsupported checkpoint version {meta.get('version')!r}", path)
    b = dict(meta["backbone"])
    b["ball"] = BallConfig(**b["ball"])
    bc = BackboneConfig(**b)
    dtype = _DTYPES[meta["dtype"]]
    model = MGPNet(bc).to(dtype)
    state = {k[len("state/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("state/")}
    model.load_state_dict(state)
    bank = PrototypeBank(torch.from_numpy(arrays["prototypes"].copy()), **meta["bank"])
    return model, bank, meta


# ---------------------------------------------------------------- training

class _JsonLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        self.lines = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record):
        line = json.dumps(record, sort_keys=True)
        self.lines.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


def init_model(cfg: ExperimentConfig, input_shape):
    torch.manual_seed(cfg.seed)
    model = MGPNet(backbone_config(cfg, input_shape)).to(_dtype(cfg))
    bank = PrototypeBank.random(cfg.data.num_classes, cfg.model.embed_dim, cfg.loss.sphere_temperature,
                                cfg.loss.ema_factor, seed=cfg.seed, dtype=_dtype(cfg))
    return model, bank


def contrastive_loss_fn(model, bank, lcfg, x_full, y_full, positives, candidates):
    def fn():
        out = model(x_full)
        batch = ContrastiveBatch(out.ball_embedding, positives, candidates)
        return out, total_loss(out, y_full, bank, batch, lcfg)
    return fn


def _held_out_batch(cfg, data: Datasets, dtype):
    n = min(cfg.sharpness.batch_size, len(data.test))
    x, y = data.test.tensors(dtype)
    return x[:n], y[:n]


def probe_loss_fn(cfg, model, bank, x, y):
    """Closure giving the clean total loss on a fixed batch, for sharpness probing."""
    aug = augmentation(cfg, cfg.seed + 7919)
    x_full, y_full, pos, cand = make_contrastive_views(x, y, aug)
    fn = contrastive_loss_fn(model, bank, loss_config(cfg), x_full, y_full, pos, cand)
    return lambda: fn()[1].total


def train(cfg: ExperimentConfig, data: Datasets | None = None, out_dir=None, log_path=None):
    """Run the training loop. Returns ``(model, bank, log_records)``.

    Per batch: optional Jitter perturbation, contrastive views, total loss,
    RSAM step, prototype EMA update. Raises :class:`DivergenceError` on a
    non-finite loss or activation after writing nothing partial.
    """
    data = data or load_datasets(cfg)
    dtype = _dtype(cfg)
    model, bank = init_model(cfg, data.input_shape)
    opt = RSAM(model.param_groups(), rsam_config(cfg))
    steps_per_epoch = max(1, -(-len(data.train) // cfg.batch_size))
    sched = None
    if cfg.optim.schedule == "cosine" and cfg.epochs > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps_per_epoch)
    elif cfg.optim.schedule not in ("cosine", "constant"):
        raise ConfigError(f"unknown lr schedule {cfg.optim.schedule!r}")
    acfg = attack_config(cfg)
    lcfg = loss_config(cfg)
    if cfg.attack.name not in ("none", "jitter"):
        raise ConfigError("training attack must be 'none' or 'jitter'")
    if cfg.attack.train_mix not in ("adversarial", "mixed"):
        raise ConfigError(f"unknown attack.train_mix {cfg.attack.train_mix!r}")

    gen = torch.Generator().manual_seed(cfg.seed)
    x_all, y_all = data.train.tensors(dtype)
    held_x, held_y = _held_out_batch(cfg, data, dtype)
    jlog = _JsonLog(log_path)
    step = 0
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(y_all), generator=gen)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            try:
                if cfg.attack.name == "jitter":
                    model.eval()
                    adv = generate_jitter(xb, yb, model, acfg, generator=gen)
                    model.train()
                    if cfg.attack.train_mix == "mixed":
                        half = len(yb) // 2
                        xb = torch.cat([xb[:half], adv.perturbed[half:]])
                    else:
                        xb = adv.perturbed
                x_full, y_full, pos, cand = make_contrastive_views(xb, yb, augmentation(cfg, 0), generator=gen)
                fn = contrastive_loss_fn(model, bank, lcfg, x_full, y_full, pos, cand)
                first = {}

                def closure():
                    out, lb = fn()
                    if not first:
                        first["out"], first["lb"] = out, lb
                    return lb.total

                report = opt.step(closure)
            except NonFiniteInput as exc:
                # blown-up weights surface first as a non-finite activation
                raise DivergenceError(str(exc), {"stage": "forward", "epoch": epoch, "step": step}) from exc
            bank = update_prototypes(bank, first["out"].sphere_embedding[:len(yb)], yb)
            record = {"epoch": epoch, "step": step, "lr": opt.param_groups[0]["lr"],
                      **first["lb"].as_floats(), **report}
            if cfg.sharpness.every and step % cfg.sharpness.every == 0:
                record["sharpness"] = sharpness_probe(model.parameters(), probe_loss_fn(cfg, model, bank, held_x, held_y),
                                                      cfg.optim.rho or 0.05)
            jlog.write(record)
            if sched is not None:
                sched.step()
            step += 1
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / "checkpoint.npz", model, bank, cfg.seed, {"epoch": epoch + 1})
    return model, bank, jlog.lines


def cmd_train(cfg: ExperimentConfig, data: Datasets | None = None):
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    try:
        model, bank, records = train(cfg, data, out, out / "train_log.jsonl")
    except DivergenceError:
        log.error("training diverged; last good checkpoint (if any) kept at %s", out / "checkpoint.npz")
        raise
    save_checkpoint(out / "checkpoint.npz", model, bank, cfg.seed, {"epoch": cfg.epochs})
    return out / "checkpoint.npz"


# ---------------------------------------------------------------- evaluation

def embedding_bank(model, split: Split, dtype, batch_size=1024) -> EmbeddingBank:
    x, y = split.tensors(dtype)
    model.eval()
    with torch.no_grad():
        z = torch.cat([model.embed_for_scoring(x[i:i + batch_size]) for i in range(0, len(y), batch_size)])
    return EmbeddingBank(z, y)


def evaluate(cfg: ExperimentConfig, model, data: Datasets, attacks=None):
    """Score every attack condition. Returns ``(EvalReport, scores per condition, extras)``."""
    dtype = next(model.parameters()).dtype
    model.eval()
    bank = embedding_bank(model, data.train, dtype, cfg.eval.batch_size)
    scorer = make_scorer(cfg.eval.scorer, bank, cfg.eval.k or None, cfg.eval.ridge)
    acfg = attack_config(cfg)
    x_id, y_id = data.test.tensors(dtype)
    x_ood, _ = data.ood.tensors(dtype)
    policy = cfg.attack.eval_policy
    rows, hist, extras = [], {}, {}
    with torch.no_grad():
        preds = model(x_id).logits.argmax(dim=1)
    extras["clean_accuracy"] = float((preds == y_id).double().mean())
    for i, name in enumerate(attacks or cfg.eval.attacks):
        gen = torch.Generator().manual_seed(cfg.seed * 1000 + i)
        res = adversarial_auc_variants(model, scorer, (x_id, y_id), x_ood, acfg, name, gen, cfg.eval.batch_size)
        s = res["scores"]
        if name == "none" or policy == "none":
            pair = (s["clean_id"], s["clean_ood"])
        elif policy == "id_only":
            pair = (s["attacked_id"], s["clean_ood"])
        elif policy == "ood_only":
            pair = (s["clean_id"], s["attacked_ood"])
        else:
            pair = (s["attacked_id"], s["attacked_ood"])
        headline = ScoreSet(*pair)
        rows.append(EvalRow(name, name, fpr_at_tpr(headline, 0.95), auroc(headline), res["auc_in"], res["auc_out"],
                            len(y_id), len(x_ood), cfg.seed))
        hist[name] = headline
    return EvalReport(rows), hist, extras


def cmd_eval(cfg: ExperimentConfig, checkpoint, attacks=None, data: Datasets | None = None):
    model, _, meta = load_checkpoint(checkpoint)
    data = data or load_datasets(cfg)
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    report, hist, _ = evaluate(cfg, model, data, attacks)
    emit_report(report, out / "report.csv")
    emit_report(report, out / "report.json")
    emit_histograms(hist, out / "histograms", bins=cfg.eval.histogram_bins)
    return report


def cmd_sharpness(cfg: ExperimentConfig, checkpoints, data: Datasets | None = None):
    """Sharpness on a fixed held-out batch for each checkpoint and rho; writes ``sharpness.csv``."""
    data = data or load_datasets(cfg)
    rows = []
    for ck in checkpoints:
        model, bank, _ = load_checkpoint(ck)
        model.eval()
        x, y = _held_out_batch(cfg, data, next(model.parameters()).dtype)
        fn = probe_loss_fn(cfg, model, bank, x, y)
        for rho in cfg.sharpness.rhos:
            gen = torch.Generator().manual_seed(cfg.seed)
            rows.append((str(ck), float(rho), sharpness_probe(model.param_groups(), fn, rho, cfg.sharpness.trials, gen)))
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    lines = ["checkpoint,rho,sharpness"] + [f"{c},{r!r},{s!r}" for c, r, s in rows]
    (out / "sharpness.csv").write_text("\n".join(lines) + "\n")
    return rows


def cmd_export_bank(cfg: ExperimentConfig, checkpoint, path=None, data: Datasets | None = None):
    model, _, _ = load_checkpoint(checkpoint)
    data = data or load_datasets(cfg)
    bank = embedding_bank(model, data.train, next(model.parameters()).dtype, cfg.eval.batch_size)
    path = Path(path) if path else cfg.resolved_output_dir() / "bank.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_bank(bank, path)
    return path

"""Training orchestration: generator pretraining, classifier training,
cross-validated evaluation, checkpoints and run manifests."""
from dataclasses import dataclass, field, asdict, fields, replace
import json
import logging
import os
import time

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io as gio
from .errors import CheckpointError, DivergenceError, ValidationError
from .generator import (
    Discriminator,
    Generator,
    GeneratorConfig,
    build_perceptual,
    discriminator_loss,
    generator_loss,
)
from .mamba import ClassifierConfig, MambaClassifier
from .metrics import (
    aggregate_reports,
    compute_metrics,
    confusion_counts,
    confusion_matrix_normalized,
    kfold_split,
    roc_auc,
)
from .tabular import (
    TabularEmbedding,
    TabularSchema,
    assemble_sequence,
    fit_schema,
    normalize_numeric,
    offset_encode,
    record_from_row,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "RunManifest",
    "PRESETS",
    "preset_configs",
    "load_config",
    "set_seed",
    "GanViT",
    "GFEMamba",
    "ImageFeatures",
    "extract_features",
    "train_generator",
    "reconstruction_error",
    "train_classifier",
    "predict",
    "evaluate_samples",
    "evaluate_run",
    "save_gan",
    "load_gan",
    "save_classifier",
    "load_classifier",
]


@dataclass
class TrainConfig:
    stage: str = "classifier"
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    device: str = "cpu"
    checkpoint_interval: int = 0
    max_steps: int = 0  # 0 = no cap
    deterministic: bool = True
    class_weighting: bool = False
    fine_tune_generator: bool = False
    use_real_pet: bool = False

    def __post_init__(self):
        if self.stage not in ("generator", "classifier"):
            raise ValidationError(f"stage must be 'generator' or 'classifier', got {self.stage!r}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        self.betas = tuple(self.betas)


@dataclass
class RunManifest:
    config: dict
    fingerprints: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    checkpoint: str = None
    divergence: dict = None

    def to_dict(self):
        return asdict(self)

    def write(self, path):
        return gio.write_json(path, self.to_dict())


PRESETS = {
    "paper": {
        "generator": dict(
            encoder_channels=(64, 128, 256), volume_dims=(128, 128, 128), patch_size=4, vit_depth=4, vit_heads=8
        ),
        "classifier": dict(d=64, depth=6),
        "train_generator": dict(epochs=200, batch_size=2, lr=1e-4),
        "train_classifier": dict(epochs=100, batch_size=8, lr=1e-4),
    },
    "desk": {
        "generator": dict(
            encoder_channels=(8, 16, 32), volume_dims=(16, 16, 16), patch_size=1, vit_depth=4, vit_heads=4,
            mosaic="rect",
        ),
        "classifier": dict(d=64, depth=6),
        "train_generator": dict(epochs=50, batch_size=2, lr=2e-3),
        "train_classifier": dict(epochs=40, batch_size=8, lr=1e-3),
    },
}


def _pick(cls, values):
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in values.items() if k in names}


def preset_configs(preset="desk", stage="classifier", overrides=None):
    """(GeneratorConfig, ClassifierConfig, TrainConfig) for a preset plus flat overrides."""
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}")
    p = PRESETS[preset]
    overrides = dict(overrides or {})
    g = {**p["generator"], **_pick(GeneratorConfig, overrides)}
    c = {**p["classifier"], **_pick(ClassifierConfig, overrides)}
    t = {**p[f"train_{stage}"], "stage": stage, **_pick(TrainConfig, overrides)}
    unknown = set(overrides) - {f.name for cls in (GeneratorConfig, ClassifierConfig, TrainConfig) for f in fields(cls)}
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    return GeneratorConfig(**g), ClassifierConfig(**c), TrainConfig(**t)


def load_config(path):
    """Flat key-value JSON mirroring the config dataclass field names."""
    data = gio.read_json(path)
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return data


def set_seed(seed, deterministic=True):
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


class GanViT(nn.Module):
    def __init__(self, cfg: GeneratorConfig, extractor=None):
        super().__init__()
        self.cfg = cfg
        self.generator = Generator(cfg)
        self.discriminator = Discriminator(cfg)
        self.perceptual = build_perceptual(cfg, extractor)


def _to_tensor(vols, dtype=torch.float32):
    return torch.as_tensor(np.stack([np.asarray(v, dtype=np.float32) for v in vols])).to(dtype)


def reconstruction_error(gen, mri, pet, batch_size=8):
    """Mean squared error between generated and real PET over all pairs."""
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(mri), batch_size):
            x = _to_tensor(mri[i:i + batch_size])
            y = _to_tensor(pet[i:i + batch_size])
            fake = gen(x)[0]
            total += F.mse_loss(fake, y, reduction="sum").item()
            n += y.numel()
    return total / n


def train_generator(mri, pet, gcfg, tcfg, out_dir=None, fingerprints=None, extractor=None):
    """Alternate a discriminator step and a generator step per batch.

    Parameters
    ----------
    mri, pet : sequences of [1, D, H, W] arrays (paired)

    Returns
    -------
    model : GanViT
    manifest : RunManifest
    """
    if len(mri) != len(pet) or not len(mri):
        raise ValidationError(f"need matching non-empty MRI/PET lists, got {len(mri)} and {len(pet)}")
    set_seed(tcfg.seed, tcfg.deterministic)
    model = GanViT(gcfg, extractor)
    gen, disc, perc = model.generator, model.discriminator, model.perceptual
    opt_g = torch.optim.Adam(gen.parameters(), lr=tcfg.lr, betas=tcfg.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=tcfg.lr, betas=tcfg.betas)
    manifest = RunManifest(
        config={"train": asdict(tcfg), "generator": gcfg.to_dict()}, fingerprints=dict(fingerprints or {})
    )
    order_rng = np.random.default_rng(tcfg.seed)
    step = 0
    ckpt = os.path.join(out_dir, "generator.ckpt") if out_dir else None
    try:
        for epoch in range(tcfg.epochs):
            sums = {"recon": 0.0, "adv": 0.0, "perceptual": 0.0, "generator": 0.0, "discriminator": 0.0}
            nb = 0
            order = order_rng.permutation(len(mri))
            for start in range(0, len(order), tcfg.batch_size):
                idx = order[start:start + tcfg.batch_size]
                x = _to_tensor([mri[i] for i in idx])
                y = _to_tensor([pet[i] for i in idx])
                opt_d.zero_grad()
                d_loss = discriminator_loss(gen, disc, x, y, gcfg)
                d_loss.backward()
                opt_d.step()

                opt_g.zero_grad()
                g_loss, parts, _ = generator_loss(gen, disc, perc, x, y, gcfg)
                g_loss.backward()
                opt_g.step()
                disc.zero_grad(set_to_none=True)

                rec = {k: float(v.item()) for k, v in parts.items()}
                rec.update(generator=float(g_loss.item()), discriminator=float(d_loss.item()))
                for k in sums:
                    sums[k] += rec[k]
                nb += 1
                manifest.steps.append({"step": step, **rec})
                step += 1
                if tcfg.max_steps and step >= tcfg.max_steps:
                    break
            manifest.epochs.append({"epoch": epoch, "steps": step, **{k: v / nb for k, v in sums.items()}})
            if ckpt and tcfg.checkpoint_interval and (epoch + 1) % tcfg.checkpoint_interval == 0:
                save_gan(ckpt, model)
                manifest.checkpoint = ckpt
            if tcfg.max_steps and step >= tcfg.max_steps:
                break
    except DivergenceError as exc:
        manifest.divergence = {"step": step, "part": exc.part, "message": str(exc)}
        if out_dir:
            manifest.write(os.path.join(out_dir, "manifest.json"))
        exc.manifest = manifest
        raise
    if ckpt:
        save_gan(ckpt, model)
        manifest.checkpoint = ckpt
        manifest.write(os.path.join(out_dir, "manifest.json"))
    return model, manifest


def save_gan(path, model):
    state = {k: v for k, v in model.state_dict().items()}
    return gio.save_checkpoint(path, state, {"kind": "gan", "generator": model.cfg.to_dict()})


def _load_state(module, params, path):
    own = module.state_dict()
    missing = sorted(set(own) - set(params))
    if missing:
        raise CheckpointError(f"{path}: missing entry {missing[0]!r}")
    for name, tensor in own.items():
        arr = params[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"{path}: {name} has shape {tuple(arr.shape)}, model expects {tuple(tensor.shape)}"
            )
    module.load_state_dict({k: torch.from_numpy(np.array(params[k])) for k in own})
    return module


def load_gan(path, extractor=None):
    params, config = gio.load_checkpoint(path)
    if config.get("kind") != "gan":
        raise CheckpointError(f"{path}: not a generator checkpoint (kind={config.get('kind')!r})")
    model = GanViT(GeneratorConfig(**config["generator"]), extractor)
    return _load_state(model, params, path)


@dataclass
class ImageFeatures:
    """Generator outputs for a list of MRI volumes (float32 tensors)."""

    x_lmp: torch.Tensor  # [n, N, P]
    x_lpp: torch.Tensor  # [n, N, P]
    mri: torch.Tensor  # [n, 1, D, H, W]
    pet: torch.Tensor  # [n, 1, D, H, W], generated unless real PET was supplied

    def subset(self, idx):
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return ImageFeatures(self.x_lmp[idx], self.x_lpp[idx], self.mri[idx], self.pet[idx])

    def __len__(self):
        return self.x_lmp.shape[0]


def extract_features(gen, mri, real_pet=None, batch_size=8):
    """Run the (frozen) generator once per volume."""
    outs = {"x_lmp": [], "x_lpp": [], "pet": []}
    with torch.no_grad():
        for i in range(0, len(mri), batch_size):
            x = _to_tensor(mri[i:i + batch_size])
            pet, a, b = gen(x)
            outs["pet"].append(pet)
            outs["x_lmp"].append(a)
            outs["x_lpp"].append(b)
    pet = torch.cat(outs["pet"])
    if real_pet is not None:
        pet = torch.stack([
            torch.as_tensor(np.asarray(r, dtype=np.float32)) if r is not None else g
            for r, g in zip(real_pet, pet)
        ])
    return ImageFeatures(torch.cat(outs["x_lmp"]), torch.cat(outs["x_lpp"]), _to_tensor(mri), pet)


def tabular_arrays(rows, schema, impute_interval=False, unseen="error"):
    """Offset codes [n, n_cat] (long) and z-scored values [n, m] (float32)."""
    codes, values = [], []
    for row in rows:
        rec = record_from_row(row, schema)
        if impute_interval:
            rec.delta_t = None
        codes.append(offset_encode(rec, schema, unseen))
        values.append(normalize_numeric(rec, schema))
    codes = torch.as_tensor(np.array(codes, dtype=np.int64).reshape(len(rows), schema.n_categorical))
    values = torch.as_tensor(np.array(values, dtype=np.float32).reshape(len(rows), schema.n_numeric))
    return codes, values


class GFEMamba(nn.Module):
    """Tabular embedding + shared patch projection + Mamba classifier."""

    def __init__(self, schema: TabularSchema, ccfg: ClassifierConfig, token_dim, use_images=True):
        super().__init__()
        if schema.embedding_dim != ccfg.d:
            schema = replace(schema, embedding_dim=ccfg.d)
        self.schema = schema
        self.ccfg = ccfg
        self.use_images = use_images
        self.tab = TabularEmbedding(schema)
        self.proj = nn.Linear(token_dim, ccfg.d)
        self.classifier = MambaClassifier(ccfg)

    def sequence(self, x_lmp, x_lpp, codes, values):
        tokens = self.tab(codes, values)
        return assemble_sequence(x_lmp, x_lpp, tokens, self.proj if self.use_images else None)

    def forward(self, x_lmp, x_lpp, codes, values, mri, pet):
        x = self.sequence(x_lmp, x_lpp, codes, values)
        return self.classifier(x, mri, pet)


def _batches(n, batch_size, rng=None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def predict(model, feats, codes, values, batch_size=16):
    """Softmax probability of the positive class for every sample."""
    model.eval()
    probs = []
    with torch.no_grad():
        for idx in _batches(len(feats), batch_size):
            f = feats.subset(idx)
            logits = model(f.x_lmp, f.x_lpp, codes[idx], values[idx], f.mri, f.pet)
            probs.append(torch.softmax(logits, dim=-1)[:, 1])
    model.train()
    return torch.cat(probs).numpy().astype(np.float64)


def train_classifier(feats, rows, labels, schema, ccfg, tcfg, gen=None, mri=None, fingerprints=None):
    """Cross-entropy training on (image features, assessment rows, labels).

    ``feats`` are precomputed with a frozen generator. With
    ``tcfg.fine_tune_generator`` the generator ``gen`` is instead run in
    the loop on ``mri`` and updated jointly.

    Returns
    -------
    model : GFEMamba
    manifest : RunManifest
        ``epochs`` holds mean loss and train accuracy (evaluation pass)
        per epoch; ``steps`` the per-step loss.
    """
    labels = np.asarray(labels).astype(int)
    if len(labels) != len(feats) or len(rows) != len(feats):
        raise ValidationError("features, rows and labels differ in length")
    set_seed(tcfg.seed, tcfg.deterministic)
    codes, values = tabular_arrays(rows, schema)
    model = GFEMamba(schema, ccfg, feats.x_lmp.shape[-1])
    params = list(model.parameters())
    if tcfg.fine_tune_generator:
        if gen is None or mri is None:
            raise ValidationError("fine_tune_generator needs the generator and the MRI volumes")
        params += list(gen.parameters())
    opt = torch.optim.Adam(params, lr=tcfg.lr, betas=tcfg.betas)
    y = torch.as_tensor(labels)
    weight = None
    if tcfg.class_weighting:
        counts = np.bincount(labels, minlength=2).astype(np.float64)
        weight = torch.as_tensor(len(labels) / (2 * np.maximum(counts, 1)), dtype=torch.float32)
    manifest = RunManifest(
        config={"train": asdict(tcfg), "classifier": asdict(ccfg), "schema": schema.to_dict()},
        fingerprints=dict(fingerprints or {}),
    )
    rng = np.random.default_rng(tcfg.seed)
    step = 0
    for epoch in range(tcfg.epochs):
        total, nb = 0.0, 0
        for idx in _batches(len(labels), tcfg.batch_size, rng):
            f = feats.subset(idx)
            if tcfg.fine_tune_generator:
                pet, a, b = gen(_to_tensor([mri[i] for i in idx]))
                f = ImageFeatures(a, b, f.mri, pet)
            logits = model(f.x_lmp, f.x_lpp, codes[idx], values[idx], f.mri, f.pet)
            loss = F.cross_entropy(logits, y[idx], weight=weight)
            if not torch.isfinite(loss):
                manifest.divergence = {"step": step, "part": "cross_entropy", "message": f"loss={loss.item()}"}
                err = DivergenceError(f"non-finite classifier loss at step {step}", part="cross_entropy")
                err.manifest = manifest
                raise err
            opt.zero_grad()
            loss.backward()
            opt.step()
            manifest.steps.append({"step": step, "loss": float(loss.item())})
            total += float(loss.item())
            nb += 1
            step += 1
            if tcfg.max_steps and step >= tcfg.max_steps:
                break
        if tcfg.fine_tune_generator:
            feats = extract_features(gen, mri)
        acc = float(np.mean((predict(model, feats, codes, values) > 0.5) == labels))
        manifest.epochs.append({"epoch": epoch, "steps": step, "loss": total / nb, "train_accuracy": acc})
        if tcfg.max_steps and step >= tcfg.max_steps:
            break
    return model, manifest


def save_classifier(path, model, extra=None):
    config = {
        "kind": "classifier",
        "classifier": asdict(model.ccfg),
        "schema": model.schema.to_dict(),
        "token_dim": model.proj.in_features,
        "use_images": model.use_images,
        **(extra or {}),
    }
    return gio.save_checkpoint(path, model.state_dict(), config)


def load_classifier(path):
    params, config = gio.load_checkpoint(path)
    if config.get("kind") != "classifier":
        raise CheckpointError(f"{path}: not a classifier checkpoint (kind={config.get('kind')!r})")
    schema = TabularSchema.from_dict(config["schema"])
    model = GFEMamba(schema, ClassifierConfig(**config["classifier"]), config["token_dim"], config["use_images"])
    return _load_state(model, params, path), config


def evaluate_samples(model, feats, rows, labels, impute_interval=True, fold_id=None):
    """Metrics report dict for one evaluation set (Δt imputed by default)."""
    labels = np.asarray(labels).astype(int)
    codes, values = tabular_arrays(rows, model.schema, impute_interval=impute_interval, unseen="unknown")
    probs = predict(model, feats, codes, values)
    preds = (probs > 0.5).astype(int)
    counts = confusion_counts(preds, labels)
    rep = compute_metrics(counts)
    out = {
        "fold_id": fold_id,
        "n": int(len(labels)),
        "counts": asdict(counts),
        "metrics": {k: v for k, v in rep.to_dict().items() if k != "undefined"},
        "flags": rep.undefined,
        "confusion_normalized": confusion_matrix_normalized(counts)[0].tolist(),
        "scores": probs.tolist(),
        "labels": labels.tolist(),
    }
    if labels.min() == labels.max():
        out.update(roc_points=None, auc=None)
        out["flags"] = {**out["flags"], "single_class_fold": True}
    else:
        roc = roc_auc(probs, labels)
        out.update(roc_points=roc.points(), auc=roc.auc)
    return out, rep


def evaluate_run(feats, rows, labels, groups, kinds, ccfg, tcfg, k=7, interval_column="delta_t_days", seed=0):
    """Grouped, label-stratified k-fold cross-validation.

    A fresh classifier is fitted per fold on the training part (schema
    statistics included); test folds get the training-mean Δt.

    Returns
    -------
    reports : list of dict (one per fold)
    aggregate : dict of metric -> {"mean", "std"} plus AUC summary
    manifests : list of RunManifest
    """
    labels = np.asarray(labels).astype(int)
    splits = kfold_split(len(labels), k, groups=groups, labels=labels, seed=seed)
    reports, metric_reps, manifests = [], [], []
    for fold, (train, test) in enumerate(splits):
        t0 = time.time()
        train_rows = [rows[i] for i in train]
        schema, _ = fit_schema(train_rows, kinds, interval_column, embedding_dim=ccfg.d)
        model, manifest = train_classifier(feats.subset(train), train_rows, labels[train], schema, ccfg, tcfg)
        rep_dict, rep = evaluate_samples(model, feats.subset(test), [rows[i] for i in test], labels[test], True, fold)
        rep_dict["provenance"] = f"{k}-fold cross-validation, fold {fold}"
        reports.append(rep_dict)
        metric_reps.append(rep)
        manifests.append(manifest)
        log.info("fold %d: acc=%.3f mcc=%.3f (%.1fs)", fold, rep.accuracy, rep.mcc, time.time() - t0)
    aggregate = aggregate_reports(metric_reps)
    aucs = [r["auc"] for r in reports if r["auc"] is not None]
    aggregate["auc"] = {"mean": float(np.mean(aucs)) if aucs else None, "std": float(np.std(aucs)) if aucs else None}
    return reports, aggregate, manifests

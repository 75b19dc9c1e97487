import numpy as np
import pytest
import torch

from gfemamba.cohort import synthesize_cohort
from gfemamba.errors import CheckpointError, DivergenceError, ValidationError
from gfemamba.io import load_checkpoint, save_checkpoint
from gfemamba.mamba import ClassifierConfig
from gfemamba.tabular import fit_schema
from gfemamba.training import (
    GanViT,
    TrainConfig,
    evaluate_samples,
    extract_features,
    load_classifier,
    load_gan,
    preset_configs,
    save_classifier,
    save_gan,
    train_classifier,
    train_generator,
)
from oracles import fd_gradient_check

SMALL = dict(d=16, depth=2, state_dim=4, attn_dim=8)


@pytest.fixture(scope="module")
def cohort():
    c = synthesize_cohort(16, signal=1.0, seed=5)
    keys = [(s.subject_id, s.baseline_date.isoformat()) for s in c.samples]
    mri = [c.volumes[k][0] for k in keys]
    pet = [c.volumes[k][1] for k in keys]
    rows = [dict(s.features, delta_t_days=s.delta_t) for s in c.samples]
    return c, mri, pet, rows


@pytest.fixture(scope="module")
def gan(cohort):
    _, mri, pet, _ = cohort
    g, _, t = preset_configs("desk", "generator", {"max_steps": 3})
    model, manifest = train_generator(mri[:4], pet[:4], g, t)
    return model, manifest


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValidationError, match="unknown config keys"):
        preset_configs("desk", "classifier", {"learning_rate": 1e-3})
    with pytest.raises(ValidationError):
        preset_configs("laptop")


def test_presets():
    g, c, t = preset_configs("paper", "generator")
    assert g.encoder_channels == (64, 128, 256) and t.lr == 1e-4 and t.batch_size == 2 and t.epochs == 200
    assert t.betas == (0.9, 0.999)
    _, _, t = preset_configs("paper", "classifier")
    assert (t.epochs, t.batch_size) == (100, 8)
    g, c, t = preset_configs("desk", "classifier", {"seed": 9, "d": 32})
    assert g.volume_dims == (16, 16, 16) and c.d == 32 and t.seed == 9


def test_generator_manifest(gan):
    _, manifest = gan
    assert len(manifest.steps) == 3 and all(np.isfinite(s["recon"]) for s in manifest.steps)
    assert {"recon", "adv", "perceptual", "generator", "discriminator"} <= set(manifest.epochs[-1])
    assert manifest.config["generator"]["mosaic"] == "rect"


def test_gan_checkpoint_roundtrip(gan, tmp_path):
    model, _ = gan
    save_gan(tmp_path / "g.ckpt", model)
    back = load_gan(tmp_path / "g.ckpt")
    for (k, a), (k2, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(a, b)
    x = torch.rand(2, 1, 16, 16, 16)
    with torch.no_grad():
        for a, b in zip(model.generator(x), back.generator(x)):
            assert torch.equal(a, b)


def test_checkpoint_shape_mismatch_names_both_shapes(gan, tmp_path):
    model, _ = gan
    save_gan(tmp_path / "g.ckpt", model)
    params, config = load_checkpoint(tmp_path / "g.ckpt")
    config["generator"]["encoder_channels"] = [8, 16, 16]
    save_checkpoint(tmp_path / "bad.ckpt", params, config)
    with pytest.raises(CheckpointError, match=r"\(32, 16, 3, 3, 3\).*\(16, 16, 3, 3, 3\)"):
        load_gan(tmp_path / "bad.ckpt")


def test_generator_divergence_is_reported(cohort, tmp_path):
    _, mri, pet, _ = cohort
    bad = [p.copy() for p in pet[:2]]
    bad[0][0, 0, 0, 0] = np.nan
    g, _, t = preset_configs("desk", "generator", {"max_steps": 2, "batch_size": 1})
    with pytest.raises(DivergenceError) as info:
        train_generator(mri[:2], bad, g, t, out_dir=str(tmp_path))
    assert info.value.manifest.divergence["part"] in ("recon", "discriminator")
    assert (tmp_path / "manifest.json").exists()


def test_generator_determinism(cohort):
    _, mri, pet, _ = cohort
    g, _, t = preset_configs("desk", "generator", {"max_steps": 2})
    a = train_generator(mri[:4], pet[:4], g, t)[1].steps
    b = train_generator(mri[:4], pet[:4], g, t)[1].steps
    assert a == b


def _classifier(cohort, gan, **overrides):
    c, mri, _, rows = cohort
    feats = extract_features(gan[0].generator, mri)
    _, ccfg, tcfg = preset_configs("desk", "classifier", {**SMALL, "epochs": 2, **overrides})
    schema, _ = fit_schema(rows, c.kinds, embedding_dim=ccfg.d)
    model, manifest = train_classifier(feats, rows, c.labels, schema, ccfg, tcfg, gen=gan[0].generator, mri=mri)
    return model, manifest, feats


def test_frozen_generator_untouched(cohort, gan):
    before = {k: v.clone() for k, v in gan[0].generator.state_dict().items()}
    _, manifest, _ = _classifier(cohort, gan)
    for k, v in gan[0].generator.state_dict().items():
        assert torch.equal(v, before[k])
    assert [set(e) for e in manifest.epochs] == [{"epoch", "steps", "loss", "train_accuracy"}] * 2


def test_fine_tune_moves_generator(cohort):
    _, mri, pet, _ = cohort
    g, _, t = preset_configs("desk", "generator", {"max_steps": 1})
    gan = train_generator(mri[:2], pet[:2], g, t)
    before = [p.clone() for p in gan[0].generator.parameters()]
    _classifier(cohort, gan, fine_tune_generator=True, epochs=1)
    assert any(not torch.equal(a, b) for a, b in zip(before, gan[0].generator.parameters()))


def test_classifier_roundtrip_and_report(cohort, gan, tmp_path):
    c, _, _, rows = cohort
    model, _, feats = _classifier(cohort, gan)
    save_classifier(tmp_path / "c.ckpt", model)
    back, config = load_classifier(tmp_path / "c.ckpt")
    assert config["kind"] == "classifier"
    rep, _ = evaluate_samples(model, feats, rows, c.labels)
    rep2, _ = evaluate_samples(back, feats, rows, c.labels)
    assert rep["scores"] == rep2["scores"]
    assert set(rep) >= {"counts", "metrics", "flags", "roc_points", "auc", "fold_id"}
    assert rep["roc_points"][0] == [0.0, 0.0] and rep["roc_points"][-1] == [1.0, 1.0]
    one = [i for i, y in enumerate(c.labels) if y == 1]
    single, _ = evaluate_samples(model, feats.subset(one), [rows[i] for i in one], c.labels[one])
    assert single["auc"] is None and single["flags"]["single_class_fold"]


def test_interval_imputation_changes_only_interval(cohort, gan):
    c, _, _, rows = cohort
    model, _, feats = _classifier(cohort, gan)
    from gfemamba.training import tabular_arrays

    _, v_real = tabular_arrays(rows, model.schema)
    _, v_imp = tabular_arrays(rows, model.schema, impute_interval=True)
    assert torch.equal(v_real[:, :-1], v_imp[:, :-1])
    assert torch.allclose(v_imp[:, -1], torch.zeros(len(rows)), atol=1e-6)


def test_classify_path_fd(cohort, gan):
    c, _, _, rows = cohort
    model, _, feats = _classifier(cohort, gan)
    model = model.double()
    from gfemamba.training import tabular_arrays

    codes, values = tabular_arrays(rows[:3], model.schema)
    f = feats.subset([0, 1, 2])
    args = (f.x_lmp.double(), f.x_lpp.double(), codes, values.double(), f.mri.double()[..., ::2, ::2, ::2],
            f.pet.double()[..., ::2, ::2, ::2])
    y = torch.as_tensor(c.labels[:3])
    loss = lambda: torch.nn.functional.cross_entropy(model(*args), y)
    errs = fd_gradient_check(loss, list(model.parameters()), n_samples=96, seed=1)
    assert max(errs) < 1e-3

import numpy as np
import pytest
import torch

from realm.core import (AblationMode, FusionRegressorConfig, ImageStore, TrainConfig, build_model,
                        load_checkpoint, mse, predict, predict_batch, prepare_inputs, save_checkpoint, train)
from realm.dataset import load_manifest
from realm.errors import ConfigurationError, InvalidInputError, TrainingAborted


@pytest.fixture(scope="module")
def smoke(smoke_manifest):
    return load_manifest(smoke_manifest)


@pytest.fixture
def model():
    return build_model(FusionRegressorConfig.smoke(), seed=0)


def test_default_config_dims():
    cfg = FusionRegressorConfig()
    assert (cfg.image_feature_dim, cfg.text_feature_dim, cfg.hidden_units) == (2048, 768, 529)
    assert cfg.concat_dim == 2816
    assert cfg.finetune_encoders


def test_head_structure(model):
    first, act, last = model.head
    assert (first.in_features, first.out_features) == (2816, 529)
    assert isinstance(act, torch.nn.ReLU)
    assert (last.in_features, last.out_features) == (529, 1)


def test_missing_weights_is_configuration_error(tmp_path):
    with pytest.raises(ConfigurationError):
        build_model(FusionRegressorConfig(image_weights=str(tmp_path / "missing.pt"), text_encoder="tiny"))
    with pytest.raises(ConfigurationError):
        build_model(FusionRegressorConfig(image_encoder="tiny", text_encoder=str(tmp_path / "no-bert")))


def test_bad_config_rejected():
    with pytest.raises(ConfigurationError):
        FusionRegressorConfig(output_dim=2)
    with pytest.raises(ConfigurationError):
        build_model(FusionRegressorConfig.smoke(image_encoder="vgg"))


def test_forward_shape_and_determinism(model, smoke):
    r = smoke.records[0]
    a = predict(model, r, base_dir=smoke.base_dir)
    b = predict(model, r, base_dir=smoke.base_dir)
    assert np.isfinite(a) and a == b


def test_batch_predict_order(model, smoke):
    recs = smoke.records[:7]
    batch = predict_batch(model, recs, batch_size=3, base_dir=smoke.base_dir)
    single = [predict(model, r, base_dir=smoke.base_dir) for r in recs]
    np.testing.assert_allclose(batch, single, rtol=1e-6, atol=1e-7)


def test_prepare_inputs_modes(smoke):
    store = ImageStore(32, smoke.base_dir)
    rec = next(r for r in smoke.records if r.description)
    img, txt = prepare_inputs(rec, "joint", store)
    assert txt == rec.description and img.shape == (3, 32, 32) and img.abs().sum() > 0
    img, txt = prepare_inputs(rec, AblationMode.IMAGE_ONLY, store)
    assert txt == ""
    img, txt = prepare_inputs(rec, "text_only", store)
    assert torch.count_nonzero(img) == 0 and img.shape == (3, 32, 32) and txt == rec.description
    with pytest.raises(InvalidInputError):
        prepare_inputs(rec, "audio_only", store)


def test_zero_learning_rate_keeps_weights(model, smoke):
    before = {k: v.clone() for k, v in model.state_dict().items()}
    model, _ = train(model, smoke.records[:8], config=TrainConfig(learning_rate=0.0, epochs=1, batch_size=8),
                     base_dir=smoke.base_dir)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_empty_split_rejected(model):
    with pytest.raises(InvalidInputError):
        train(model, [])


def test_nan_loss_aborts_with_history(model, smoke):
    model.head.register_forward_hook(lambda mod, inp, out: out * float("nan"))
    with pytest.raises(TrainingAborted) as info:
        train(model, smoke.records[:8], config=TrainConfig(epochs=2, batch_size=4), base_dir=smoke.base_dir)
    assert info.value.history is not None and len(info.value.history) == 0
    assert "non-finite loss" in str(info.value)


def _feats(model, smoke, n=4):
    store = ImageStore(32, smoke.base_dir)
    images = torch.stack([prepare_inputs(r, "joint", store)[0] for r in smoke.records[:n]])
    texts = [r.description for r in smoke.records[:n]]
    with torch.no_grad():
        return model.features(images, texts).double(), images, texts


def test_head_gradient_matches_finite_differences(model, smoke):
    feats, _, _ = _feats(model, smoke)
    head = model.head.double()
    targets = torch.linspace(0.2, 0.8, feats.shape[0], dtype=torch.float64)

    def loss_fn():
        return torch.mean((head(feats).squeeze(-1) - targets) ** 2)

    head.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(0)
    eps = 1e-6
    for param in head.parameters():
        flat = param.data.view(-1)
        for idx in rng.choice(flat.numel(), min(8, flat.numel()), replace=False):
            analytic = param.grad.view(-1)[idx].item()
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                up = loss_fn().item()
                flat[idx] = orig - eps
                down = loss_fn().item()
                flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            assert abs(analytic - numeric) <= 1e-4 * max(abs(numeric), 1e-3)


def test_joint_gradients_reach_both_inputs(model, smoke):
    _, images, texts = _feats(model, smoke)
    images = images.clone().requires_grad_(True)
    img_feat = model.image_encoder(images)
    txt_feat = model.text_encoder(texts).detach().requires_grad_(True)
    out = model.head(torch.cat([img_feat, txt_feat], dim=1)).sum()
    out.backward()
    assert images.grad.norm() > 0
    assert txt_feat.grad.norm() > 0

    # central difference along the gradient direction of the text features
    direction = txt_feat.grad / txt_feat.grad.norm()
    eps = 1e-3
    with torch.no_grad():
        up = model.head(torch.cat([img_feat, txt_feat + eps * direction], 1)).sum()
        down = model.head(torch.cat([img_feat, txt_feat - eps * direction], 1)).sum()
    numeric = ((up - down) / (2 * eps)).item()
    assert numeric == pytest.approx(txt_feat.grad.norm().item(), rel=1e-2)


def test_seed_reproducibility(smoke):
    cfg = TrainConfig(epochs=3, batch_size=8, seed=5, normalize_mos=True)
    runs = []
    for _ in range(2):
        m = build_model(FusionRegressorConfig.smoke(), seed=5)
        _, hist = train(m, smoke.records[:24], smoke.records[24:], cfg, base_dir=smoke.base_dir)
        runs.append(hist.losses())
    assert runs[0] == runs[1]
    assert len(runs[0]["train_loss"]) == 3 == len(runs[0]["val_srocc"])


def test_history_log_written(model, smoke, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=8, normalize_mos=True)
    train(model, smoke.records[:16], smoke.records[16:], cfg, base_dir=smoke.base_dir, log_path=tmp_path / "h.jsonl")
    lines = (tmp_path / "h.jsonl").read_text().splitlines()
    assert len(lines) == 2 and '"val_srocc"' in lines[0]


@pytest.mark.parametrize("mode", ["image_only", "text_only"])
def test_ablation_isolation(model, smoke, tmp_path, mode):
    from dataclasses import replace
    from PIL import Image

    recs = smoke.records[:6]
    base = predict_batch(model, recs, mode, base_dir=smoke.base_dir)
    if mode == "image_only":
        perturbed = [replace(r, description="a completely different text " + r.id) for r in recs]
    else:
        perturbed = []
        for r in recs:
            arr = np.random.default_rng(1).integers(0, 255, (32, 32, 3), dtype=np.uint8)
            Image.fromarray(arr).save(tmp_path / f"{r.id}.png")
            perturbed.append(replace(r, image_ref=str(tmp_path / f"{r.id}.png")))
    assert predict_batch(model, perturbed, mode, base_dir=smoke.base_dir) == base


def test_checkpoint_round_trip(model, smoke, tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=8, normalize_mos=True)
    model, _ = train(model, smoke.records[:8], config=cfg, base_dir=smoke.base_dir)
    path = save_checkpoint(tmp_path / "ck.pt", model, cfg, seed=0, mode="joint")
    loaded, blob = load_checkpoint(path)
    assert blob["mode"] == "joint" and blob["train_config"]["learning_rate"] == 1e-4
    r = smoke.records[3]
    assert predict(loaded, r, base_dir=smoke.base_dir) == predict(model, r, base_dir=smoke.base_dir)
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "none.pt")


def test_smoke_training_halves_mse(smoke):
    model = build_model(FusionRegressorConfig.smoke(), seed=0)
    cfg = TrainConfig(epochs=30, batch_size=8, normalize_mos=True)
    model, hist = train(model, smoke.records, config=cfg, base_dir=smoke.base_dir)
    assert mse(model, smoke.records, base_dir=smoke.base_dir) <= 0.5 * hist.initial_train_mse

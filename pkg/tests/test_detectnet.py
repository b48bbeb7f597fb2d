import math
import warnings

import numpy as np
import pytest
import torch

from crackseg import checkpoint as ckpt
from crackseg.dataio import Patch
from crackseg.detectnet import (DetectConfig, build_detector, detect_loss, evaluate_detector,
                                load_detect_checkpoint, predict_patches, save_detect_checkpoint,
                                train_detector)
from crackseg.synthetic import line_patch


def _patches(n=64, seed=0):
    rng = np.random.default_rng(seed)
    return [(line_patch(i % 2 == 0, 100, rng), i % 2 == 0) for i in range(n)]


class TestLoss:
    def test_half(self):
        assert float(detect_loss([0.5], [1])) == pytest.approx(math.log(2), abs=1e-12)

    def test_batch_hand_value(self):
        assert float(detect_loss([0.9, 0.1], [1, 0])) == pytest.approx(-math.log(0.9), abs=1e-12)

    def test_perfect_limit(self):
        assert float(detect_loss([1 - 1e-12], [1])) < 1e-6

    def test_decreases_toward_label(self):
        ps = np.linspace(0.05, 0.95, 10)
        up = [float(detect_loss([p], [1])) for p in ps]
        down = [float(detect_loss([p], [0])) for p in ps]
        assert all(a > b for a, b in zip(up, up[1:]))
        assert all(a < b for a, b in zip(down, down[1:]))
        assert min(up + down) >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            detect_loss([0.5, 0.5], [1])


class TestModels:
    def test_tiny_range(self):
        model = build_detector(DetectConfig(backbone="tiny")).eval()
        with torch.no_grad():
            p = model.predict_proba(torch.rand(4, 3, 100, 100))
        assert p.shape == (4,) and bool(((p >= 0) & (p <= 1)).all())

    @pytest.mark.parametrize("backbone", ["alexnet_like", "vgg16_like", "vgg19_like", "resnet_like"])
    def test_backbones_single_probability(self, backbone):
        model = build_detector(DetectConfig(backbone=backbone)).eval()
        with torch.no_grad():
            p = model.predict_proba(torch.rand(1, 3, 100, 100))
        assert p.shape == (1,)

    def test_unknown_backbone(self):
        with pytest.raises(ValueError):
            DetectConfig(backbone="mobilenet")

    def test_small_input_rejected(self):
        with pytest.raises(ValueError):
            DetectConfig(input_size=16)

    def test_missing_pretrained_weights_warn(self, tmp_path):
        cfg = DetectConfig(backbone="tiny", pretrained_init=True, weights_path=str(tmp_path / "none.pt"))
        with pytest.warns(RuntimeWarning, match="pretrained"):
            model = build_detector(cfg)
        assert model is not None

    def test_pretrained_weights_loaded(self, tmp_path):
        src = build_detector(DetectConfig(backbone="tiny"), seed=3)
        torch.save(src.net.state_dict(), tmp_path / "w.pt")
        cfg = DetectConfig(backbone="tiny", pretrained_init=True, weights_path=str(tmp_path / "w.pt"))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            model = build_detector(cfg, seed=9)
        assert torch.equal(model.net.classifier.weight, src.net.classifier.weight)


def test_finite_difference_gradient():
    torch.manual_seed(0)
    model = build_detector(DetectConfig(backbone="tiny"), seed=1).double()
    x = torch.rand(4, 3, 100, 100, dtype=torch.float64)
    y = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    loss = detect_loss(model.predict_proba(x), y)
    params = list(model.parameters())
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(0)
    checked = ok = 0
    h = 1e-6
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.view(-1)
            for idx in rng.choice(flat.numel(), size=min(5, flat.numel()), replace=False):
                orig = flat[idx].item()
                flat[idx] = orig + h
                up = float(detect_loss(model.predict_proba(x), y))
                flat[idx] = orig - h
                down = float(detect_loss(model.predict_proba(x), y))
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                an = float(gflat[idx])
                checked += 1
                if abs(fd - an) <= 1e-3 * max(abs(fd), abs(an)) or abs(fd - an) < 1e-9:
                    ok += 1
    assert ok == checked


def test_train_and_evaluate():
    patches = _patches()
    cfg = DetectConfig(backbone="tiny", phase_length=100)
    model, history = train_detector(build_detector(cfg, seed=0), patches, cfg, seed=0)
    assert len(history) == 200
    assert history[99][2] == 1e-3 and history[100][2] == 3e-4
    metrics = evaluate_detector(model, patches)
    assert metrics.accuracy >= 0.95
    assert metrics.n_samples == 64 and metrics.mean_latency_ms > 0
    preds = predict_patches(model, patches[:4])
    assert all((p.label == "crack") == (p.p_crack >= 0.5) for p in preds)


def test_default_history_length():
    assert DetectConfig().total_iters == 500


def test_training_is_deterministic():
    patches = _patches(16)
    cfg = DetectConfig(backbone="tiny", phase_length=5, batch_size=8)
    _, h1 = train_detector(build_detector(cfg, seed=2), patches, cfg, seed=4)
    _, h2 = train_detector(build_detector(cfg, seed=2), patches, cfg, seed=4)
    assert h1 == h2


def test_single_class_rejected():
    patches = [(line_patch(True, 100, i), True) for i in range(4)]
    cfg = DetectConfig(backbone="tiny", phase_length=2)
    with pytest.raises(ValueError, match="both"):
        train_detector(build_detector(cfg), patches, cfg)


class _Oracle(torch.nn.Module):
    """Predicts crack exactly when the patch is bright somewhere."""

    config = DetectConfig(backbone="tiny")

    def __init__(self, const=None):
        super().__init__()
        self.const = const

    def predict_proba(self, x):
        if self.const is not None:
            return torch.full((x.shape[0],), self.const)
        return (x.amax(dim=(1, 2, 3)) > 0.6).float()


def test_accuracy_of_exact_model():
    assert evaluate_detector(_Oracle(), _patches(20)).accuracy == 1.0


def test_constant_half_model():
    # ties go to crack, so a balanced set scores 0.5
    assert evaluate_detector(_Oracle(const=0.5), _patches(20)).accuracy == 0.5


def test_accuracy_permutation_invariant():
    patches = _patches(20)
    model = _Oracle(const=0.7)
    shuffled = [patches[i] for i in np.random.default_rng(1).permutation(20)]
    assert evaluate_detector(model, patches).accuracy == evaluate_detector(model, shuffled).accuracy


def test_empty_evaluation():
    with pytest.raises(ValueError):
        evaluate_detector(_Oracle(), [])


def test_patch_objects_accepted():
    rng = np.random.default_rng(0)
    patches = [Patch(line_patch(i % 2 == 0, 100, rng), "crack" if i % 2 == 0 else "non_crack", (0, 0))
               for i in range(6)]
    assert evaluate_detector(_Oracle(), patches).accuracy == 1.0


def test_checkpoint_roundtrip(tmp_path):
    model = build_detector(DetectConfig(backbone="tiny"), seed=5)
    save_detect_checkpoint(tmp_path / "d.ckpt", model, iteration=7)
    loaded, meta = load_detect_checkpoint(tmp_path / "d.ckpt")
    assert meta["iteration"] == 7
    assert ckpt.read_magic(tmp_path / "d.ckpt") == "CRACKDET1"
    x = torch.rand(2, 3, 100, 100)
    model.eval(), loaded.eval()
    with torch.no_grad():
        assert torch.equal(model(x), loaded(x))

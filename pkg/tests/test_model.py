from collections import OrderedDict

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import central_diff_grad
from sspsd.errors import ConfigError, SchemaError, ShapeError, ShapeMismatch
from sspsd.model import (
    Detector,
    ModelConfig,
    ema_alpha,
    ema_update,
    ema_update_module,
    images_to_tensor,
    load_checkpoint,
    make_teacher,
    save_checkpoint,
)

TOY = dict(image_size=16, input_size=16, grid_size=4, encoder_channels=(4, 4), latent_channels=3,
           decoder_channels=5)


@pytest.fixture(scope="module")
def default_model():
    torch.manual_seed(0)
    return Detector(ModelConfig()).eval()


def _toy(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return Detector(ModelConfig(**TOY)).to(dtype).eval()


def test_zero_image_gives_finite_latent(default_model):
    z = default_model.encode(torch.zeros(1, 1, 512, 512))
    assert torch.isfinite(z).all()


def test_latent_is_16x16_and_deterministic(default_model):
    x = torch.rand(2, 1, 512, 512)
    with torch.no_grad():
        z1 = default_model.encode(x)
        z2 = default_model.encode(x)
    assert z1.shape == (2, 64, 16, 16)
    assert torch.equal(z1, z2)


def test_output_ranges(default_model):
    z = torch.randn(3, 64, 16, 16) * 50
    with torch.no_grad():
        g = default_model.decode(z)
    assert g.shape == (3, 16, 16, 9)
    for ch in (0, 1, 2, 7, 8):
        assert g[..., ch].min() >= 0 and g[..., ch].max() <= 1
    assert g[..., 3:7].abs().max() <= 1


def test_shape_errors(default_model):
    with pytest.raises(ShapeError):
        default_model.encode(torch.zeros(1, 1, 256, 256))
    with pytest.raises(ShapeError):
        default_model.decode(torch.zeros(1, 32, 16, 16))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(encoder_channels=(16, 32))
    with pytest.raises(ConfigError):
        ModelConfig(input_size=96)
    cfg = ModelConfig(input_size=128, encoder_channels=(8, 16, 32))
    assert Detector(cfg).encode(torch.zeros(1, 1, 512, 512)).shape == (1, 64, 16, 16)


def test_local_lipschitz_ratio():
    model = _toy(1)
    z = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    r = torch.randn_like(z)
    r /= r.norm()
    with torch.no_grad():
        base = model.decode(z)
        big = (model.decode(z + 1e-3 * r) - base).norm()
        small = (model.decode(z + 1e-4 * r) - base).norm()
    assert 9.0 < float(big / small) < 11.0


@pytest.mark.parametrize("seed", range(50))
def test_decoder_gradient_matches_finite_differences(seed):
    model = _toy(seed)
    z0 = torch.randn(1, 3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    z = z0.clone().requires_grad_(True)
    model.decode(z).mean().backward()

    def f(arr):
        with torch.no_grad():
            return float(model.decode(torch.from_numpy(arr)).mean())

    fd = central_diff_grad(f, z0.numpy())
    g = z.grad.numpy()
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_images_to_tensor_layout():
    a = np.full((4, 4), 255, np.uint8)
    b = np.zeros((4, 4, 3), np.uint8)
    assert images_to_tensor([a]).shape == (1, 1, 4, 4)
    assert float(images_to_tensor([a]).max()) == 1.0
    assert images_to_tensor([b, b]).shape == (2, 3, 4, 4)


# -- EMA ----------------------------------------------------------------

def _params(*vals):
    return OrderedDict((f"w{i}", torch.tensor([v], dtype=torch.float64)) for i, v in enumerate(vals))


def test_ema_alpha_zero_copies_student():
    t, s = _params(1.0, -3.0), _params(5.0, 7.0)
    out = ema_update(t, s, 0.0)
    assert all(torch.equal(out[k], s[k]) for k in s)


def test_ema_alpha_one_freezes_teacher():
    t, s = _params(1.0, -3.0), _params(5.0, 7.0)
    out = ema_update(t, s, 1.0)
    assert all(torch.equal(out[k], t[k]) for k in t)


def test_ema_one_step_fixture():
    out = ema_update(_params(2.0), _params(1.0), 0.999)
    assert abs(float(out["w0"]) - 1.999) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(0, 1), st.integers(0, 1000))
def test_ema_is_elementwise_affine(values, alpha, seed):
    t = OrderedDict(a=torch.tensor(values, dtype=torch.float64))
    s = OrderedDict(a=torch.tensor(np.random.default_rng(seed).uniform(-1e3, 1e3, len(values))))
    out = ema_update(t, s, alpha)["a"]
    for o, x, y in zip(out.tolist(), t["a"].tolist(), s["a"].tolist()):
        assert o == pytest.approx(alpha * x + (1 - alpha) * y, abs=1e-9)


def test_ema_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ema_update(OrderedDict(a=torch.zeros(2)), OrderedDict(a=torch.zeros(3)), 0.5)
    with pytest.raises(ShapeMismatch):
        ema_update(OrderedDict(a=torch.zeros(2)), OrderedDict(b=torch.zeros(2)), 0.5)


def test_ema_alpha_schedule():
    assert ema_alpha(0) == 0.0
    assert ema_alpha(1) == 0.5
    assert ema_alpha(10 ** 6) == 0.999
    assert ema_alpha(50, alpha_max=0.9) == 0.9


def test_ema_module_matches_functional():
    student, teacher = _toy(1), _toy(2)
    expected = ema_update(OrderedDict(teacher.named_parameters()), OrderedDict(student.named_parameters()), 0.7)
    ema_update_module(teacher, student, 0.7)
    for name, p in teacher.named_parameters():
        assert torch.allclose(p, expected[name], atol=1e-15)


def test_make_teacher_is_frozen_copy():
    student = _toy(3)
    teacher = make_teacher(student)
    assert all(not p.requires_grad for p in teacher.parameters())
    for (n1, a), (n2, b) in zip(student.state_dict().items(), teacher.state_dict().items()):
        assert n1 == n2 and torch.equal(a, b)


# -- checkpoints --------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    student, teacher = _toy(4).float(), _toy(5).float()
    path = save_checkpoint(tmp_path / "m.pt", student, teacher, 17, {"lr": 0.1})
    ck = load_checkpoint(path)
    assert ck["magic"] == "SSPSD1" and ck["step"] == 17 and ck["config"] == {"lr": 0.1}
    for a, b in ((student, ck["student"]), (teacher, ck["teacher"])):
        for x, y in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(x, y)
    assert not (tmp_path / "m.pt.tmp").exists()


def test_checkpoint_rejects_foreign_file(tmp_path):
    torch.save({"weights": 1}, tmp_path / "x.pt")
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path / "x.pt")

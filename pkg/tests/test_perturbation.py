import copy
import hashlib
import warnings

import pytest
import torch

from sspsd.errors import DegenerateGradient
from sspsd.model import Detector, ModelConfig
from sspsd.perturbation import adaptive_vat, grid_distance, random_direction, vat_noise

TOY = dict(image_size=32, input_size=32, grid_size=4, encoder_channels=(8, 8, 8), latent_channels=8,
           decoder_channels=16)


def _decoder(seed, dtype=torch.float32):
    torch.manual_seed(seed)
    return Detector(ModelConfig(**TOY)).to(dtype).eval().decode


def _latent(seed, batch=4, dtype=torch.float32):
    return torch.randn(batch, 8, 4, 4, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def _norms(t):
    return t.flatten(1).norm(dim=1)


@pytest.mark.parametrize("eps", [10.0, 1.0, 0.1])
def test_noise_norm_equals_eps(eps):
    noise = vat_noise(_latent(0), _decoder(0), eps, generator=torch.Generator().manual_seed(1))
    assert torch.allclose(_norms(noise).double(), torch.full((4,), eps, dtype=torch.float64), atol=1e-6 * max(eps, 1))


def test_constant_decoder_falls_back_to_random_direction():
    torch.manual_seed(0)
    model = Detector(ModelConfig(**TOY)).double()
    with torch.no_grad():
        for name, p in model.decoder.named_parameters():
            if name != "body.4.bias":
                p.zero_()
    z = _latent(0, dtype=torch.float64)
    r0 = random_direction(z, torch.Generator().manual_seed(3))
    with pytest.warns(DegenerateGradient):
        noise = vat_noise(z, model.decode, 0.5, r0=r0)
    assert torch.allclose(noise, 0.5 * r0, atol=1e-12)
    assert torch.allclose(_norms(noise), torch.full((4,), 0.5, dtype=torch.float64), atol=1e-6)


def _mean_distance(decode, z, noise):
    with torch.no_grad():
        return float(grid_distance(decode(z + noise), decode(z)))


@pytest.mark.parametrize("eps", [10.0, 1.0, 0.1])
def test_vat_beats_random_noise(eps):
    decode = _decoder(7)
    gen = torch.Generator().manual_seed(11)
    wins = 0
    for b in range(100):
        z = _latent(100 + b)
        with warnings.catch_warnings():
            warnings.simplefilter("error", DegenerateGradient)
            adv = vat_noise(z, decode, eps, generator=gen)
        rand = eps * random_direction(z, gen)
        wins += _mean_distance(decode, z, adv) >= _mean_distance(decode, z, rand)
    assert wins >= 90


def test_deterministic_given_seed():
    z = _latent(5)
    a = vat_noise(z, _decoder(2), 1.0, generator=torch.Generator().manual_seed(9))
    b = vat_noise(z, _decoder(2), 1.0, generator=torch.Generator().manual_seed(9))
    assert torch.equal(a, b)
    ra = adaptive_vat(z, _decoder(2), _decoder(3), 1.0, generator=torch.Generator().manual_seed(9))
    rb = adaptive_vat(z, _decoder(2), _decoder(3), 1.0, generator=torch.Generator().manual_seed(9))
    assert torch.equal(ra.noise, rb.noise) and ra.selected == rb.selected


def _param_hash(model):
    h = hashlib.sha256()
    for p in model.state_dict().values():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def test_parameters_untouched():
    torch.manual_seed(0)
    model = Detector(ModelConfig(**TOY))
    before = _param_hash(model)
    vat_noise(_latent(1), model.decode, 1.0, n_power_iter=3)
    adaptive_vat(_latent(1), model.decode, model.decode, 1.0)
    assert _param_hash(model) == before
    assert all(p.grad is None for p in model.parameters())


def test_identical_decoders_tie_to_teacher():
    dec = _decoder(4)
    twin = copy.deepcopy(dec.__self__).decode
    for mode in ("robust_min", "aggressive_max"):
        res = adaptive_vat(_latent(2), dec, twin, 1.0, mode, generator=torch.Generator().manual_seed(0))
        assert res.induced_distance_teacher == res.induced_distance_student
        assert res.selected == "teacher"
        assert torch.allclose(_norms(res.noise), torch.ones(4), atol=1e-6)


def test_modes_pick_different_decoders():
    for seed in range(10):
        t, s = _decoder(10 + seed), _decoder(50 + seed)
        lo = adaptive_vat(_latent(seed), t, s, 1.0, "robust_min", generator=torch.Generator().manual_seed(seed))
        hi = adaptive_vat(_latent(seed), t, s, 1.0, "aggressive_max", generator=torch.Generator().manual_seed(seed))
        assert lo.induced_distance_teacher != lo.induced_distance_student
        assert lo.selected != hi.selected
        want = "student" if lo.induced_distance_student < lo.induced_distance_teacher else "teacher"
        assert lo.selected == want


def test_both_branches_exercised_during_training():
    """Frozen random teacher vs. a student decoder trained for 200 steps."""
    teacher = _decoder(20)
    torch.manual_seed(21)
    student_model = Detector(ModelConfig(**TOY))
    gen = torch.Generator().manual_seed(0)

    def selections():
        out = []
        for b in range(50):
            res = adaptive_vat(_latent(1000 + b), teacher, student_model.decode, 0.1, generator=gen)
            out.append(res.selected)
        return out

    early = selections()
    opt = torch.optim.Adam(student_model.decoder.parameters(), lr=1e-2)
    target = torch.rand(4, 4, 4, 9, generator=torch.Generator().manual_seed(1))
    for step in range(200):
        z = _latent(step)
        loss = ((student_model.decode(z) - target) ** 2).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    late = selections()
    assert {"teacher", "student"} <= set(early + late)
    assert early != late

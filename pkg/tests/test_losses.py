import numpy as np
import pytest
import torch

from tashr.errors import ConfigError, NonFiniteLossError, ShapeMismatchError
from tashr.losses import (LossBreakdown, detection_loss, feature_loss, gan_losses, gram,
                          pixel_loss, text_loss, total_loss)
from tashr.providers import RandomConvProvider

torch.set_default_dtype(torch.float32)


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# straight-line numpy oracles ------------------------------------------------

def np_pixel(o, g):
    # o, g: (N, C, H, W); out(i,j) vs gt(i-1,j) and gt(i,j-1)
    n, c, h, w = o.shape
    main = np.mean(np.abs(o - g))
    vert = [abs(o[a, b, i, j] - g[a, b, i - 1, j])
            for a in range(n) for b in range(c) for i in range(1, h) for j in range(w)]
    horiz = [abs(o[a, b, i, j] - g[a, b, i, j - 1])
             for a in range(n) for b in range(c) for i in range(h) for j in range(1, w)]
    return 5 * main + 0.1 * (np.mean(vert) + np.mean(horiz))


def np_gram(f):
    c, h, w = f.shape
    out = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            out[i, j] = sum(f[i].ravel()[k] * f[j].ravel()[k] for k in range(h * w)) / (c * h * w)
    return out


def np_feature(fo, fg):
    perc = sum(np.mean(np.abs(a - b)) for a, b in zip(fo, fg))
    style = sum(np.mean([np.abs(np_gram(a[n]) - np_gram(b[n])) for n in range(a.shape[0])])
                for a, b in zip(fo, fg))
    return 0.05 * perc + 120 * style


def test_detection_loss_examples():
    m = torch.rand(2, 1, 8, 8)
    assert float(detection_loss(m, m)) == 0
    assert float(detection_loss(torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4))) == 1.0
    assert float(detection_loss(torch.full((1, 1, 4, 4), 0.25), torch.full((1, 1, 4, 4), 0.75))) == 0.5
    with pytest.raises(ShapeMismatchError):
        detection_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


def test_pixel_loss_constant_images():
    x = torch.full((1, 3, 8, 8), 0.4, dtype=torch.float64)
    assert float(pixel_loss(x, x)) == 0.0
    assert abs(float(pixel_loss(x + 0.1, x)) - 0.52) < 1e-12


def test_pixel_loss_identical_nonconstant_by_hand():
    # 2x2 ramp [[0, 1], [2, 3]] / 4: vertical pairs |2-0|, |3-1| -> 0.5; horizontal |1-0|, |3-2| -> 0.25
    x = torch.tensor([[[[0.0, 0.25], [0.5, 0.75]]]], dtype=torch.float64)
    assert abs(float(pixel_loss(x, x)) - 0.1 * (0.5 + 0.25)) < 1e-12
    # a conventional TV term compares the output with itself and gives the same number here
    assert abs(float(pixel_loss(x, x, "self_shift")) - 0.075) < 1e-12
    with pytest.raises(ConfigError):
        pixel_loss(x, x, "other")


def test_pixel_loss_matches_oracle():
    rng = np.random.default_rng(0)
    o, g = rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8))
    assert abs(float(pixel_loss(_t(o), _t(g))) - np_pixel(o, g)) < 1e-6


def test_gram_examples():
    assert torch.equal(gram(torch.ones(1, 2, 2)), torch.tensor([[1.0]]))
    assert torch.count_nonzero(gram(torch.zeros(3, 4, 4))) == 0
    f = torch.zeros(2, 2, 2)
    f[0, 0, 0] = 1.0
    f[1, 1, 1] = 1.0
    g = gram(f)
    assert g[0, 1] == 0 and g[1, 0] == 0


def test_gram_matches_oracle():
    f = np.random.default_rng(1).random((3, 4, 5))
    np.testing.assert_allclose(gram(_t(f)).numpy(), np_gram(f), atol=1e-12)


@pytest.fixture(scope="module")
def provider():
    return RandomConvProvider("feat", 2, 4, seed=3).double()


def test_feature_loss_basic(provider):
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    y = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    assert float(feature_loss(x, x, provider)) == 0
    assert abs(float(feature_loss(x, y, provider)) - float(feature_loss(y, x, provider))) < 1e-12


def test_feature_loss_matches_oracle(provider):
    rng = np.random.default_rng(2)
    o, g = rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8))
    with torch.no_grad():
        fo = [f.numpy() for f in provider.extract(_t(o))]
        fg = [f.numpy() for f in provider.extract(_t(g))]
    assert abs(float(feature_loss(_t(o), _t(g), provider)) - np_feature(fo, fg)) < 1e-6


def test_gan_examples():
    z = torch.zeros(2, 1, 4, 4)
    l_g, l_d = gan_losses(z, z)
    assert float(l_d) == 2.0 and float(l_g) == 0.0
    l_g, l_d = gan_losses(torch.full_like(z, 2.0), torch.full_like(z, -2.0))
    assert float(l_d) == 0.0 and float(l_g) == 2.0
    l_g, _ = gan_losses(z, torch.full_like(z, 3.0))
    assert float(l_g) == -3.0


def test_gan_matches_oracle():
    rng = np.random.default_rng(3)
    r, f = rng.normal(size=(3, 1, 4, 4)), rng.normal(size=(3, 1, 4, 4))
    l_g, l_d = gan_losses(_t(r), _t(f))
    assert abs(float(l_g) + f.mean()) < 1e-12
    ref = np.mean(np.maximum(0, 1 - r)) + np.mean(np.maximum(0, 1 + f))
    assert abs(float(l_d) - ref) < 1e-12


@pytest.fixture(scope="module")
def text_providers():
    return (RandomConvProvider("det", 3, 4, seed=5).double(),
            RandomConvProvider("rec", 1, 4, seed=6).double())


def test_text_loss(text_providers):
    det, rec = text_providers
    rng = np.random.default_rng(4)
    o, g = _t(rng.random((1, 3, 8, 8))), _t(rng.random((1, 3, 8, 8)))
    assert float(text_loss(o, o, det, rec)) == 0
    with torch.no_grad():
        fo = [f.numpy() for f in det.extract(o)] + [f.numpy() for f in rec.extract(o)]
        fg = [f.numpy() for f in det.extract(g)] + [f.numpy() for f in rec.extract(g)]
    ref = sum(np.mean(np.abs(a - b)) for a, b in zip(fo, fg))
    assert abs(float(text_loss(o, g, det, rec)) - ref) < 1e-6


def test_text_loss_layer_count_checked(text_providers):
    det, rec = text_providers
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    with pytest.raises(ConfigError):
        text_loss(x, x, rec, rec)
    with pytest.raises(ConfigError):
        text_loss(x, x, det, det)


def test_text_loss_permutation_equivariant_provider():
    det = RandomConvProvider("det", 3, 4, seed=7, kernel_size=1, pool=False).double()
    rec = RandomConvProvider("rec", 1, 4, seed=8, kernel_size=1, pool=False).double()
    rng = np.random.default_rng(5)
    o, g = rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8))
    perm = rng.permutation(64)

    def shuffle(a):
        return a.reshape(1, 3, 64)[:, :, perm].reshape(1, 3, 8, 8)

    a = float(text_loss(_t(o), _t(g), det, rec))
    b = float(text_loss(_t(shuffle(o)), _t(shuffle(g)), det, rec))
    assert abs(a - b) < 1e-12


def test_total_loss_examples():
    assert float(total_loss(0, 0, 0, 0, 0).total) == 0
    assert abs(total_loss(1, 1, 1, 1, 1).total - 13.01) < 1e-12
    assert abs(total_loss(0, 0, 0, -3, 0).total + 0.03) < 1e-12


def test_total_loss_linearity_random():
    rng = np.random.default_rng(6)
    for parts in rng.normal(size=(100, 5)) * 10:
        bd = total_loss(*parts)
        ref = 10 * parts[0] + parts[1] + parts[2] + 0.01 * parts[3] + parts[4]
        assert abs(bd.total - ref) <= 1e-12 * max(1, abs(ref))


def test_total_loss_names_nonfinite_term():
    with pytest.raises(NonFiniteLossError) as e:
        total_loss(0, 0, float("nan"), 0, 0)
    assert e.value.term == "l_feature"
    with pytest.raises(NonFiniteLossError) as e:
        total_loss(0, 0, 0, 0, 0, l_gan_d=torch.tensor(float("inf")))
    assert e.value.term == "l_gan_d"


def test_breakdown_floats():
    bd = total_loss(torch.tensor(0.5, requires_grad=True), 1.0, 0.0, 2.0, 0.0)
    assert bd.as_floats()["total"] == pytest.approx(6.02)
    assert set(bd.as_floats()) == set(LossBreakdown.FIELDS)


def test_providers_are_frozen(provider):
    assert all(not p.requires_grad for p in provider.parameters())
    provider.train()
    assert not provider.training
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    feature_loss(x, torch.rand_like(x), provider).backward()
    assert x.grad is not None and torch.count_nonzero(x.grad) > 0
    assert all(p.grad is None for p in provider.parameters())


def test_losses_nonnegative_random():
    det = RandomConvProvider("d", 3, 4, seed=1)
    rec = RandomConvProvider("r", 1, 4, seed=2)
    for seed in range(10):
        g = torch.Generator().manual_seed(seed)
        o, t = torch.rand(1, 3, 8, 8, generator=g), torch.rand(1, 3, 8, 8, generator=g)
        assert pixel_loss(o, t) >= 0
        assert feature_loss(o, t, det) >= 0
        assert text_loss(o, t, det, rec) >= 0
        assert gan_losses(torch.randn(1, 1, 2, 2, generator=g), torch.randn(1, 1, 2, 2, generator=g))[1] >= 0

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from ndvq import losses as L
from ndvq import numerics as nx
from ndvq.signal import AudioBuffer

W = L.LossWeights()


# -- time and mel reconstruction -----------------------------------------


def test_time_l1_examples():
    assert L.time_l1([0.3, -0.2], [0.3, -0.2]).item() == 0.0
    assert L.time_l1([1.0, 1.0], [0.0, 0.0]).item() == 1.0


def test_time_l1_gradient_is_sign_over_t():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y0 = rng.standard_normal(16), rng.standard_normal(16)
        y = nx.Tensor(y0, requires_grad=True)
        L.time_l1(x, y).backward()
        assert_allclose(y.adjoint, -np.sign(x - y0) / 16)
        assert nx.grad_check(lambda t: L.time_l1(x, t), y0) < 1e-3


def test_time_l1_errors():
    with pytest.raises(L.LossShapeError):
        L.time_l1([0.0, 1.0], [0.0])
    with pytest.raises(L.LossShapeError):
        L.time_l1(AudioBuffer(np.zeros(4), 8000), AudioBuffer(np.zeros(4), 16000))


def test_mel_loss_zero_on_identical_and_nonnegative():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(300)
    assert L.multiscale_mel_loss(x, x, 8000).item() == 0.0
    for _ in range(10):
        assert L.multiscale_mel_loss(x, rng.standard_normal(300), 8000).item() >= 0.0


def test_mel_loss_uses_usable_scales():
    # 100 samples: only the 32- and 64-sample windows fit
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal(100), rng.standard_normal(100)
    got = L.multiscale_mel_loss(x, y, 8000).item()
    manual = np.mean([L.multiscale_mel_loss(x, y, 8000, windows=(w,)).item() for w in (32, 64)])
    assert got == pytest.approx(manual, rel=1e-12)


def test_mel_loss_per_scale_is_mean_abs_plus_rms():
    from ndvq.signal import log_mel_np

    rng = np.random.default_rng(3)
    x, y = rng.standard_normal(256), rng.standard_normal(256)
    d = log_mel_np(x, 64, 8000) - log_mel_np(y, 64, 8000)
    expected = np.mean(np.abs(d)) + np.sqrt(np.mean(d**2))
    assert L.multiscale_mel_loss(x, y, 8000, windows=(64,)).item() == pytest.approx(expected, rel=1e-10)


def test_mel_loss_too_short():
    with pytest.raises(L.LossShapeError):
        L.multiscale_mel_loss(np.zeros(20), np.zeros(20), 8000)


def test_mel_loss_gradient_20_points():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x, y0 = rng.standard_normal(80), rng.standard_normal(80)
        coords = rng.choice(80, 12, replace=False)
        assert nx.grad_check(lambda t: L.multiscale_mel_loss(x, t, 8000), y0, coords=coords) < 1e-3


# -- adversarial losses --------------------------------------------------


def test_adversarial_examples():
    assert L.adversarial_gen_loss([1.0, 2.5]).item() == 0.0
    assert L.adversarial_gen_loss([0.0]).item() == 1.0
    assert L.adversarial_gen_loss([-1.0, 3.0]).item() == 1.0
    with pytest.raises(L.LossShapeError):
        L.adversarial_gen_loss([])


def test_discriminator_hinge_examples():
    assert L.discriminator_hinge_loss([1.0, 4.0], [-1.0, -2.0]).item() == 0.0
    assert L.discriminator_hinge_loss([0.0], [0.0]).item() == 2.0
    assert L.discriminator_hinge_loss([2.0], [0.5]).item() == 1.5
    with pytest.raises(L.LossShapeError):
        L.discriminator_hinge_loss([0.0, 1.0], [0.0])


def test_feature_matching_examples():
    real = L.DiscriminatorOutput([0.0], [[np.array([2.0])]])
    fake = L.DiscriminatorOutput([0.0], [[np.array([1.0])]])
    assert L.feature_matching_loss(real, fake).item() == 0.5
    assert L.feature_matching_loss(real, real).item() == 0.0


def test_feature_matching_shape_mismatch():
    real = L.DiscriminatorOutput([0.0], [[np.ones(3)]])
    with pytest.raises(L.LossShapeError):
        L.feature_matching_loss(real, L.DiscriminatorOutput([0.0], [[np.ones(2)]]))
    with pytest.raises(L.LossShapeError):
        L.feature_matching_loss(real, L.DiscriminatorOutput([0.0], [[np.ones(3), np.ones(3)]]))


def test_feature_matching_silent_real_uses_floor():
    real = L.DiscriminatorOutput([0.0], [[np.zeros(2)]])
    fake = L.DiscriminatorOutput([0.0], [[np.full(2, 1e-8)]])
    assert L.feature_matching_loss(real, fake).item() == pytest.approx(1.0)


@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_feature_matching_scale_invariant(c, seed):
    rng = np.random.default_rng(seed)
    fr = [[rng.standard_normal((3, 4)), rng.standard_normal(5)], [rng.standard_normal(2)]]
    ff = [[rng.standard_normal((3, 4)), rng.standard_normal(5)], [rng.standard_normal(2)]]
    base = L.feature_matching_loss(L.DiscriminatorOutput([0.0, 0.0], fr), L.DiscriminatorOutput([0.0, 0.0], ff)).item()
    scaled = L.feature_matching_loss(
        L.DiscriminatorOutput([0.0, 0.0], [[c * a for a in k] for k in fr]),
        L.DiscriminatorOutput([0.0, 0.0], [[c * a for a in k] for k in ff]),
    ).item()
    assert scaled == pytest.approx(base, rel=1e-9)
    assert base >= 0


def test_hinge_and_fm_gradients():
    rng = np.random.default_rng(5)
    for _ in range(20):
        logits = rng.uniform(-3, 3, 4)
        logits = np.where(np.abs(np.abs(logits) - 1) < 1e-2, 0.0, logits)
        assert nx.grad_check(lambda t: L.adversarial_gen_loss([t[i] for i in range(4)]), logits) < 1e-3
        assert nx.grad_check(lambda t: L.discriminator_hinge_loss([t[0], t[1]], [t[2], t[3]]), logits) < 1e-3
        real = L.DiscriminatorOutput([0.0], [[rng.standard_normal(6)]])
        f0 = rng.standard_normal(6)
        assert nx.grad_check(lambda t: L.feature_matching_loss(real, L.DiscriminatorOutput([0.0], [[t]])), f0) < 1e-3


# -- totals --------------------------------------------------------------


def test_generator_total_default_weights():
    assert L.generator_total(0, 0, 0, 0, 0, W) == 0
    assert L.generator_total(1, 1, 1, 1, 1, W) == 7.5


@given(st.lists(st.floats(0, 10), min_size=5, max_size=5), st.floats(0, 10))
def test_generator_total_linear_in_fm_weight(terms, extra):
    import dataclasses

    lt, lf, la, lfm, lc = terms
    base = L.generator_total(lt, lf, la, lfm, lc, W)
    doubled = L.generator_total(lt, lf, la, lfm, lc, dataclasses.replace(W, feature_matching=10.0))
    assert doubled - base == pytest.approx(5.0 * lfm, abs=1e-9)


def test_discriminator_total():
    import dataclasses

    assert L.discriminator_total(0.0, W) == 0.0
    assert L.discriminator_total(2.0, W) == 2.0
    assert L.discriminator_total(3.7, dataclasses.replace(W, discriminator=0.0)) == 0.0


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        L.LossWeights(time=-1.0)


# -- discriminator stub --------------------------------------------------


def test_stub_shapes_and_determinism():
    x = np.random.default_rng(6).standard_normal((2, 1024))
    d1, d2 = L.StftDiscriminatorStub(0), L.StftDiscriminatorStub(0)
    out1, out2 = d1(x), d2(x)
    assert len(out1.logits) == 4  # 2048 does not fit in 1024 samples
    assert [l.item() for l in out1.logits] == [l.item() for l in out2.logits]
    assert all(len(f) == 2 for f in out1.features)


def test_stub_losses_end_to_end_gradient():
    rng = np.random.default_rng(7)
    disc = L.StftDiscriminatorStub(1, windows=(128, 256))
    x = rng.standard_normal((1, 512))
    real = disc(x)

    def gen_loss(y):
        fake = disc(nx.reshape(y, (1, -1)))
        return L.adversarial_gen_loss(fake.logits) + L.feature_matching_loss(real, fake)

    y0 = rng.standard_normal(512)
    assert nx.grad_check(gen_loss, y0, coords=rng.choice(512, 10, replace=False)) < 1e-3

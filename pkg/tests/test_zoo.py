import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitlab import nn
from splitlab.defenses import distance_correlation
from splitlab.nn.gradcheck import numeric_grad
from splitlab.zoo import (
    SPLIT_AFTER,
    Autoencoder,
    GanConfig,
    Generator,
    InverseNet,
    SplitModel,
    TrainConfig,
    make_corpus,
    train_autoencoder,
    train_gan,
    train_inverse_net,
    train_target,
)
from splitlab.zoo.corpus import PRIVATE_OOD, PUBLIC_OOD


@pytest.fixture(scope="module")
def model():
    return SplitModel(rng=np.random.default_rng(0))


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(1).uniform(0, 1, (4, 3, 16, 16)).astype(np.float32)


def small_gen(dtype=np.float32):
    g = Generator(z_dim=6, w_dim=5, channels=(6, 6, 4, 4), rng=np.random.default_rng(2))
    return g.astype(dtype)


# split model --------------------------------------------------------------------------

@pytest.mark.parametrize("split", [1, 2, 3])
def test_split_identity_bit_exact(model, images, split):
    assert np.array_equal(model.server_forward(model.client_forward(images, split), split), model.forward(images))


def test_client_is_prefix_of_blocks(model, images):
    x = images
    for block in model.blocks[:SPLIT_AFTER[1]]:
        x = nn.Stack(block)(x)
    assert np.array_equal(model.client_forward(images, 1), x)


def test_h_shapes(model, images):
    assert [model.h_shape(s) for s in (1, 2, 3)] == [(12, 16, 16), (16, 8, 8), (16, 8, 8)]
    assert model.forward(images).shape == (4, 4)


def test_zero_weights_give_bias_constant(images):
    m = SplitModel(rng=np.random.default_rng(0))
    m.set_params({k: np.zeros_like(v) if k.endswith("weight") else v for k, v in m.params().items()})
    out = m.forward(images)
    assert np.array_equal(out, np.broadcast_to(m.full.layers[-1].params["bias"], out.shape))


def test_split_point_validation(model):
    with pytest.raises(ValueError):
        SplitModel(split_point=4)
    with pytest.raises(nn.ShapeError):
        model.client_forward(np.zeros((1, 3, 8, 8), np.float32), 1)
    with pytest.raises(nn.ShapeError):
        model.server_forward(np.zeros((1, 16, 8, 8), np.float32), 1)


def test_forward_is_deterministic(model, images):
    assert np.array_equal(model.forward(images), model.forward(images))


# generator --------------------------------------------------------------------------

def test_mapping_zero_weights_gives_bias():
    g = small_gen()
    g.mapping.set_params({k: np.zeros_like(v) if k.endswith("weight") else v for k, v in g.mapping.params().items()})
    w = g.map(np.random.default_rng(0).standard_normal((3, g.z_dim)).astype(np.float32))
    assert np.array_equal(w, np.broadcast_to(g.mapping.layers[-1].params["bias"], w.shape))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_generator_decomposition_identity(seed):
    g = small_gen()
    w = g.map(np.random.default_rng(seed).standard_normal((2, g.z_dim)).astype(np.float32))
    full = g.synthesize(w)
    assert full.shape == (2, 3, 16, 16) and full.min() >= 0 and full.max() <= 1
    for i in range(1, g.depth + 1):
        assert np.array_equal(g.synthesize_from(i, g.feature(i, w), w), full)


def test_generator_shapes_and_errors():
    g = small_gen()
    assert g.depth == 3
    assert [g.feature_shape(i) for i in (1, 2, 3)] == [(6, 4, 4), (6, 8, 8), (4, 16, 16)]
    w = np.zeros((1, g.w_dim), np.float32)
    with pytest.raises(ValueError):
        g.synthesize_from(4, None, w)
    with pytest.raises(nn.ShapeError):
        g.synthesize_from(2, np.zeros((1, 6, 4, 4), np.float32), w)
    with pytest.raises(nn.ShapeError):
        g.map(np.zeros((1, g.z_dim + 1), np.float32))


def test_mapping_gradient_finite_differences():
    g = small_gen(np.float64)
    rng = np.random.default_rng(3)
    z, r = rng.standard_normal((2, g.z_dim)), rng.standard_normal((2, g.w_dim))
    w, cache = g.mapping.forward(z)
    analytic = g.mapping.backward(cache, r, need_params=False).input
    num = numeric_grad(lambda: float((g.map(z) * r).sum()), z, 1e-6)
    assert np.linalg.norm(analytic - num) / np.linalg.norm(num) < 1e-4


@pytest.mark.parametrize("stage", [0, 1, 2, 3])
def test_synthesize_from_gradients(stage):
    g = small_gen(np.float64)
    rng = np.random.default_rng(4 + stage)
    w = g.map(rng.standard_normal((2, g.z_dim)))
    hf = g.feature(stage, w) + 0.1 * rng.standard_normal((2, *g.feature_shape(stage))) if stage else None
    r = rng.standard_normal((2, 3, 16, 16))
    x, caches = g.remain_forward(stage, hf, w)
    d_hf, d_w, _ = g.remain_backward(stage, caches, r)
    loss = lambda: float((g.synthesize_from(stage, hf, w) * r).sum())  # noqa: E731
    num_w = numeric_grad(loss, w, 1e-6)
    assert np.linalg.norm(d_w - num_w) / np.linalg.norm(num_w) < 1e-4
    if stage:
        num_hf = numeric_grad(loss, hf, 1e-6)
        assert np.linalg.norm(d_hf - num_hf) / np.linalg.norm(num_hf) < 1e-4
    else:
        assert d_hf is None


def test_generator_sampling_is_seeded():
    g = small_gen()
    assert np.array_equal(g.sample(3, np.random.default_rng(5)), g.sample(3, np.random.default_rng(5)))


# autoencoder and inverse net ----------------------------------------------------------

def test_autoencoder_and_inverse_shapes(model, images):
    assert Autoencoder(width=8)(images).shape == images.shape
    for s in (1, 2, 3):
        inv = InverseNet(model.h_shape(s), width=8, split_point=s)
        assert inv(model.client(s)(images)).shape == images.shape


# corpus -----------------------------------------------------------------------------

def test_corpus_is_deterministic_and_disjoint():
    a, b = make_corpus(60, 40, seed=3), make_corpus(60, 40, seed=3)
    assert np.array_equal(a.private_images, b.private_images)
    assert np.array_equal(a.public_labels, b.public_labels)
    priv = {x.tobytes() for x in a.private_images}
    assert not priv & {x.tobytes() for x in a.public_images}
    assert a.private_images.min() >= 0 and a.private_images.max() <= 1
    assert set(np.unique(a.private_labels)) <= {0, 1, 2, 3}


def test_ood_corpus_uses_disjoint_factor_bands():
    c = make_corpus(50, 50, ood=True, seed=0)
    assert PUBLIC_OOD.hue[1] <= PRIVATE_OOD.hue[0]
    assert c.public_factors["hue"].max() < c.private_factors["hue"].min()
    assert c.public_factors["scale"].max() <= c.private_factors["scale"].min()


def test_private_split_sizes():
    c = make_corpus(50, 10, seed=0)
    xtr, ytr, xte, yte = c.private_split()
    assert len(xtr) == 40 and len(xte) == 10 and len(ytr) == 40 and len(yte) == 10


# training loops: reproducibility on tiny budgets -------------------------------------

@pytest.fixture(scope="module")
def tiny_corpus():
    return make_corpus(80, 60, seed=4)


def _same_params(a, b):
    pa, pb = a.params(), b.params()
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_train_target_reproducible(tiny_corpus):
    cfg = TrainConfig(epochs=1, lr=1e-3, batch_size=16, seed=3)
    a, ha = train_target(tiny_corpus, cfg)
    b, hb = train_target(tiny_corpus, cfg)
    assert _same_params(a, b) and ha.loss == hb.loss and len(ha.loss) == 1


def test_train_gan_reproducible_and_logged(tiny_corpus):
    cfg = GanConfig(steps=6, batch_size=4, log_every=2, seed=1)
    kw = {"channels": (4, 4, 4, 4), "z_dim": 4, "w_dim": 4}
    a, ha = train_gan(tiny_corpus.public_images, cfg, kw)
    b, hb = train_gan(tiny_corpus.public_images, cfg, kw)
    assert _same_params(a, b)
    assert len(ha.loss) == 3 and ha.loss == hb.loss
    assert 0 <= ha.extra["d_fake"] <= 1 and 0 <= ha.extra["pixel_js"] <= 1


def test_decoders_reproducible(tiny_corpus, model):
    cfg = TrainConfig(epochs=1, batch_size=16, seed=2)
    a, _ = train_autoencoder(tiny_corpus.public_images, cfg, width=4)
    b, _ = train_autoencoder(tiny_corpus.public_images, cfg, width=4)
    assert _same_params(a, b)
    c, h = train_inverse_net(tiny_corpus.public_images, model.client(2), 2, cfg, width=4)
    d, _ = train_inverse_net(tiny_corpus.public_images, model.client(2), 2, cfg, width=4)
    assert _same_params(c, d) and np.isfinite(h.extra["holdout_mse"])


# trained desk-scale zoo --------------------------------------------------------------

def test_target_accuracy(desk):
    assert desk["history"]["target"]["test_accuracy"] >= 0.9


def test_gan_sanity_band(desk):
    h = desk["history"]["gan"]
    assert 0.3 <= h["d_fake"] <= 0.7
    assert h["pixel_js"] < GanConfig().js_bound
    assert h["sample_std"] > 0.05


def test_autoencoder_holdout_mse(desk):
    assert desk["history"]["ae"]["holdout_mse"] < 0.02


def test_inverse_net_depth_trend(desk):
    h = desk["history"]
    assert h["inverse-split1"]["holdout_mse"] < h["inverse-split3"]["holdout_mse"]


def test_nopeek_lowers_distance_correlation(desk):
    x = desk["corpus"].private_split()[2][:256].astype(np.float64)
    plain = distance_correlation(x, desk["zoo"].target.client(1)(x))
    defended = distance_correlation(x, desk["nopeek"].client(1)(x))
    assert defended < plain


def test_nopeek_accuracy_not_below_chance(desk):
    # lambda2 = 5 makes the dCor term dominate; the representation collapses towards 4-class chance
    assert desk["history"]["target-nopeek"]["test_accuracy"] > 0.25

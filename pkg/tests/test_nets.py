import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfmkit import tensor as T
from cfmkit.errors import ConfigError, DimensionError
from cfmkit.gradcheck import check_gradients
from cfmkit.nets import ConditionEmbedder, Discriminator, VectorFieldNet, eval_discriminator, eval_velocity
from cfmkit.rng import RngStream
from cfmkit.tensor import Tensor


def small_net(seed=0, **kw):
    kw.setdefault("hidden", (16, 16))
    kw.setdefault("time_features", 6)
    return VectorFieldNet(2, 3, RngStream(seed), **kw)


def test_zero_head_gives_zero_velocity():
    net = small_net(zero_head=True)
    rng = np.random.default_rng(0)
    v = eval_velocity(net, rng.uniform(size=5), rng.normal(size=(5, 2)), rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(v.data, np.zeros((5, 2)))


@given(st.integers(1, 9), st.integers(0, 1000))
def test_output_shape_matches_data(batch, seed):
    net = small_net(seed)
    rng = np.random.default_rng(seed)
    v = net.velocity(rng.uniform(size=batch), rng.normal(size=(batch, 2)), np.zeros((batch, 3)))
    assert v.shape == (batch, 2)


def test_same_masks_give_identical_outputs():
    net = small_net(dropout_rate=0.2)
    masks = net.make_masks(RngStream(4), 6)
    rng = np.random.default_rng(1)
    t, x, c = rng.uniform(size=6), rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    a = eval_velocity(net, t, x, c, masks)
    b = eval_velocity(net, t, x, c, masks)
    assert a.data.tobytes() == b.data.tobytes()
    plain = eval_velocity(net, t, x, c)
    assert plain.data.tobytes() == eval_velocity(net, t, x, c).data.tobytes()


def test_untracked_evaluation_never_grows_tape():
    net = small_net()
    with T.tape() as tp:
        net.velocity(np.zeros(3), np.ones((3, 2)), np.ones((3, 3)), track_gradients=False)
        assert len(tp) == 0
        net.velocity(np.zeros(3), np.ones((3, 2)), np.ones((3, 3)))
        assert len(tp) > 0


def test_mask_and_shape_errors():
    net = small_net(dropout_rate=0.1)
    with pytest.raises(DimensionError):
        net.velocity(np.zeros(3), np.ones((3, 2)), np.ones((3, 3)), net.make_masks(RngStream(0), 4))
    with pytest.raises(DimensionError):
        net.velocity(np.zeros(3), np.ones((3, 2)), np.ones((3, 3)), net.make_masks(RngStream(0), 3)[:1])
    with pytest.raises(DimensionError):
        net.velocity(np.zeros(3), np.ones((3, 5)), np.ones((3, 3)))
    with pytest.raises(ConfigError):
        small_net(activation="relu6")


def test_velocity_norm_gradient_matches_finite_differences():
    net = small_net(seed=3)
    rng = np.random.default_rng(2)
    x = Tensor(rng.uniform(-2, 2, size=(4, 2)), requires_grad=True)
    t, c = rng.uniform(size=4), rng.normal(size=(4, 3))
    err = check_gradients(lambda: T.sum(T.l2_norm_squared(net.velocity(t, x, c))), [x], rng)
    assert err < 1e-4


def test_parameter_count_reported():
    net = small_net()
    expected = (2 + 6 + 3) * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2
    assert net.num_parameters() == expected


def test_discriminator_zero_head_scores_zero_and_exposes_layers():
    disc = Discriminator(2, RngStream(0), hidden=(8, 8, 8), zero_head=True)
    score, feats = eval_discriminator(disc, np.random.default_rng(0).normal(size=(5, 2)))
    np.testing.assert_array_equal(score.data, np.zeros(5))
    assert len(feats) == 3 == disc.num_feature_maps
    assert [f.shape for f in feats] == [(5, 8)] * 3


def test_discriminator_score_is_unbounded():
    disc = Discriminator(2, RngStream(5), hidden=(8,))
    score, _ = disc(np.array([[1e3, -1e3]]))
    assert abs(score.item()) > 1.0


def test_discriminator_condition_contract():
    disc = Discriminator(2, RngStream(0), hidden=(4,), cond_dim=3)
    disc(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        disc(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        Discriminator(2, RngStream(0), hidden=(4,))(np.zeros((2, 2)), np.zeros((2, 3)))


def test_discriminator_weight_gradient_matches_finite_differences():
    disc = Discriminator(2, RngStream(8), hidden=(6, 6))
    rng = np.random.default_rng(4)
    x = rng.uniform(-2, 2, size=(5, 2))

    def objective():
        score, _ = disc(x)
        return T.sum(T.square(T.subtract(1.0, score)))

    assert check_gradients(objective, disc.parameters(), rng) < 1e-4


def test_frozen_embedder_gets_no_gradient():
    emb = ConditionEmbedder(4, 3, RngStream(0))
    emb.frozen = True
    with T.tape() as tp:
        grads = tp.backward(T.sum(emb(np.array([0, 1, 3]))))
    assert emb.table not in grads
    emb.frozen = False
    with T.tape() as tp:
        grads = tp.backward(T.sum(emb(np.array([0, 1, 3]))))
    np.testing.assert_array_equal(grads[emb.table].sum(axis=1), [3, 3, 0, 3])


def test_embedder_rejects_unknown_label():
    with pytest.raises(DimensionError):
        ConditionEmbedder(2, 3, RngStream(0))(np.array([2]))

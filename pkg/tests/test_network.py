import numpy as np
import pytest

from transdrop.autodiff import Tape, backward
from transdrop.network import (ConcreteLayerwise, DropoutPolicy, Ensemble, FeatureDependent,
                               FixedRate, LastLayerOnly, MLPSpec, NoDropout, forward, init,
                               load_checkpoint, rate_for, save_checkpoint)

SPEC = MLPSpec(1, (32, 64))


def test_init_is_seeded():
    a = init(SPEC, DropoutPolicy(FeatureDependent()), seed=7)
    b = init(SPEC, DropoutPolicy(FeatureDependent()), seed=7)
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_weight_shapes_follow_fan_in_fan_out():
    m = init(SPEC)
    assert [m.params[f"W{i}"].shape for i in range(3)] == [(1, 32), (32, 64), (64, 1)]
    assert all(not m.params[f"b{i}"].any() for i in range(3))


def test_initial_weight_sd():
    m = init(MLPSpec(100, (100,)), seed=0)
    w = m.params["W0"].ravel()
    assert w.size == 10_000
    assert abs(w.std() - 0.1) < 0.01


def test_rate_net_starts_near_light_dropout():
    m = init(MLPSpec(3, (8,)), DropoutPolicy(FeatureDependent()), seed=0)
    r = rate_for(m, np.random.default_rng(0).normal(size=(20, 3)))
    assert np.all(np.abs(r - 0.1) < 0.05)


def test_rate_is_one_half_with_zero_rate_net():
    m = init(SPEC, DropoutPolicy(FeatureDependent()), seed=0)
    for k in m.params:
        if k.startswith("rate/"):
            m.params[k][...] = 0.0
    np.testing.assert_array_equal(rate_for(m, np.linspace(-5, 5, 7)), 0.5)


def test_rate_respects_clamp():
    m = init(SPEC, DropoutPolicy(FeatureDependent(), rate_clamp=0.05), seed=0)
    m.params["rate/b1"][...] = 50.0
    assert np.all(rate_for(m, np.linspace(-3, 3, 5)) <= 0.95)
    m.params["rate/b1"][...] = -50.0
    assert np.all(rate_for(m, np.linspace(-3, 3, 5)) >= 0.05)


def test_rate_for_requires_feature_policy():
    with pytest.raises(TypeError):
        rate_for(init(SPEC, DropoutPolicy(FixedRate(0.5))), np.zeros(3))


def test_input_dimension_checked():
    with pytest.raises(ValueError):
        forward(init(MLPSpec(2, (4,))), np.zeros((3, 3)))


def test_relaxed_passes_average_to_deterministic_at_tiny_rate():
    m = init(SPEC, DropoutPolicy(FixedRate(0.0), temperature=0.1), seed=1)
    x = np.linspace(0, 16, 50)[:, None]
    det = forward(m, x, "none")[0].value
    # rate 0 is clamped to 0.01, so a pass drops about one of the 96 units
    reps = 2000
    relaxed = forward(m, np.tile(x, (reps, 1)), "relaxed", np.random.default_rng(0))[0].value
    avg = relaxed.reshape(reps, -1).mean(axis=0)
    assert np.abs(avg - det[:, 0]).max() < 0.01 * np.abs(det).mean()


def test_sampled_masks_are_reproducible():
    m = init(SPEC, DropoutPolicy(FixedRate(0.5)), seed=1)
    x = np.zeros((4, 1))
    _, m1 = forward(m, x, "sampled", np.random.default_rng(3))
    _, m2 = forward(m, x, "sampled", np.random.default_rng(3))
    for a, b in zip(m1, m2):
        np.testing.assert_array_equal(a, b)


def test_keep_fraction_at_rate_one_half():
    m = init(MLPSpec(1, (64,)), DropoutPolicy(FixedRate(0.5)), seed=0)
    _, masks = forward(m, np.zeros((10_000, 1)), "sampled", np.random.default_rng(0))
    assert abs(masks[0].mean() - 0.5) < 0.02


def test_deterministic_pass_ignores_rng():
    m = init(SPEC, DropoutPolicy(FixedRate(0.3)), seed=2)
    x = np.linspace(0, 1, 5)
    a = forward(m, x, "none", np.random.default_rng(0))[0].value
    b = forward(m, x, "none", np.random.default_rng(99))[0].value
    assert a.tobytes() == b.tobytes()


def test_relaxed_masks_harden_at_low_temperature():
    m = init(SPEC, DropoutPolicy(FixedRate(0.1), temperature=0.01), seed=0)
    _, masks = forward(m, np.zeros((2000, 1)), "relaxed", np.random.default_rng(0))
    r = np.concatenate([mk.ravel() for mk in masks])
    assert np.mean(np.abs(r - np.round(r)) < 0.05) >= 0.99


@pytest.mark.parametrize("rate", [0.1, 0.3, 0.5])
def test_soft_mask_fraction_matches_logistic_oracle(rate):
    # a mask is soft when |L + logit(keep)| < T * logit(0.95), L standard logistic
    T = 0.01
    m = init(SPEC, DropoutPolicy(FixedRate(rate), temperature=T), seed=0)
    _, masks = forward(m, np.zeros((2000, 1)), "relaxed", np.random.default_rng(1))
    r = np.concatenate([mk.ravel() for mk in masks])
    soft = np.mean(np.abs(r - np.round(r)) >= 0.05)
    c, a = np.log((1 - rate) / rate), T * np.log(19.0)
    cdf = lambda v: 1 / (1 + np.exp(-v))
    expected = cdf(a - c) - cdf(-a - c)
    assert abs(soft - expected) < 4 * np.sqrt(expected / r.size) + 1e-4


def test_last_layer_only_masks_final_hidden_layer():
    m = init(SPEC, DropoutPolicy(LastLayerOnly(0.5)), seed=0)
    _, masks = forward(m, np.zeros((3, 1)), "sampled", np.random.default_rng(0))
    assert masks[0] is None and masks[1] is not None


def test_no_dropout_has_no_masks():
    m = init(SPEC, DropoutPolicy(NoDropout()), seed=0)
    _, masks = forward(m, np.zeros((3, 1)), "sampled", np.random.default_rng(0))
    assert masks == [None, None]


def _rate_grad(mode):
    m = init(MLPSpec(2, (8, 8)), DropoutPolicy(FeatureDependent()), seed=0)
    x = np.random.default_rng(1).normal(size=(6, 2))
    tape = Tape()
    nodes = m.bind(tape)
    out, _ = forward(m, x, mode, np.random.default_rng(2), tape=tape, nodes=nodes)
    backward(tape, tape.sum(tape.square(out)))
    return np.concatenate([nodes[k].grad.ravel() for k in nodes if k.startswith("rate/")])


def test_rate_gradients_only_through_relaxed_masks():
    assert not _rate_grad("sampled").any()
    assert np.abs(_rate_grad("relaxed")).max() > 0


def test_classification_output_is_probability():
    m = init(MLPSpec(2, (4,), task="binary-classification"), seed=0)
    p = forward(m, np.random.default_rng(0).normal(size=(10, 2)) * 10)[0].value
    assert np.all((p > 0) & (p < 1))


@pytest.mark.parametrize("variant", [NoDropout(), FixedRate(0.5), ConcreteLayerwise(),
                                     LastLayerOnly(0.2), FeatureDependent()])
def test_checkpoint_round_trip(tmp_path, variant):
    m = init(MLPSpec(3, (5, 4), task="binary-classification"), DropoutPolicy(variant), seed=4)
    m.scaler = (np.array([1.0, 2.0, 3.0]), np.array([0.5, 1.0, 2.0]))
    path = tmp_path / "model.json"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.spec == m.spec and back.dropout == m.dropout
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()
    np.testing.assert_array_equal(back.scaler[1], m.scaler[1])


def test_ensemble_checkpoint_round_trip(tmp_path):
    ens = Ensemble([init(SPEC, seed=i) for i in range(3)])
    save_checkpoint(ens, tmp_path / "e.json")
    back = load_checkpoint(tmp_path / "e.json")
    assert isinstance(back, Ensemble) and len(back.members) == 3
    assert back.members[2].params["W1"].tobytes() == ens.members[2].params["W1"].tobytes()


def test_checkpoint_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        load_checkpoint(p)

import math

import numpy as np
import pytest

from celltissue.tinynet import autograd as ag
from celltissue.tinynet.model import (ALL_BASE_VARIANTS, BranchSpec, Kind, ModelVariant, NetSpec, TinyNet,
                                      enumerate_sharing_configs)
from celltissue.tinynet.train import Adam, _random_batch, dice_loss, grad_check, relative_error, train_step

CENTERS = [(0.5, 0.5), (0.375, 0.625)]


def inputs(rng, n=2, cell=16, store=16):
    return rng.normal(size=(n, 3, cell, cell)), rng.normal(size=(n, 3, store, store))


def onehot_tissue(idx):
    return (np.arange(2)[None, :, None, None] == idx[:, None]).astype(float)


@pytest.mark.parametrize("variant", ALL_BASE_VARIANTS + [ModelVariant(Kind.FEATURE_SHARING, ("both",) * 3)],
                         ids=str)
def test_output_shapes_and_softmax(variant, rng):
    x_s, x_l = rng.normal(size=(1, 3, 64, 64)), rng.normal(size=(1, 3, 64, 64))
    y = onehot_tissue(rng.integers(0, 2, (1, 64, 64)))
    cell, tissue = TinyNet(variant).predict(x_s, x_l, [(0.5, 0.5)], y)
    assert cell.shape == (1, 3, 64, 64)
    np.testing.assert_allclose(cell.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(cell >= 0)
    if variant.uses_tissue_branch:
        assert tissue.shape == (1, 2, 64, 64)
        np.testing.assert_allclose(tissue.sum(axis=1), 1.0, atol=1e-12)
    else:
        assert tissue is None


def test_missing_inputs_are_errors(rng):
    x_s, x_l = inputs(rng)
    with pytest.raises(ValueError, match="needs tissue labels"):
        TinyNet("tissue-label-leaking").forward(x_s, x_l, CENTERS)
    with pytest.raises(ValueError, match="needs the tissue patch"):
        TinyNet("pred-to-inter-1").forward(x_s, None, CENTERS)
    with pytest.raises(ValueError, match="cell input"):
        TinyNet("cell-only").forward(x_s[:, :2])


def test_cell_only_ignores_tissue(rng):
    net = TinyNet("cell-only", seed=3)
    x_s, x_l = inputs(rng)
    a, _ = net.predict(x_s, x_l, CENTERS)
    b, _ = net.predict(x_s, x_l * 5 + 1, CENTERS)
    assert a.tobytes() == b.tobytes()


def test_sharing_with_no_exchange_is_two_independent_branches(rng):
    net = TinyNet(ModelVariant(Kind.FEATURE_SHARING, ("none",) * 3), seed=1)
    assert not any(k.startswith(("t2c", "c2t")) for k in net.params)
    x_s, x_l = inputs(rng)
    a, _ = net.predict(x_s, x_l, CENTERS)
    b, _ = net.predict(x_s, -x_l, CENTERS)
    assert a.tobytes() == b.tobytes()


def test_leaking_sees_only_the_window(rng):
    net = TinyNet("tissue-label-leaking", seed=2)
    x_s, _ = inputs(rng, 1)
    idx = rng.integers(0, 2, (1, 16, 16))
    base, _ = net.predict(x_s, None, [(0.5, 0.5)], onehot_tissue(idx))
    outside = idx.copy()
    outside[0, :6] = 1 - outside[0, :6]  # rows 0..5 are above the window 6..9
    outside[0, :, 10:] = 1 - outside[0, :, 10:]
    same, _ = net.predict(x_s, None, [(0.5, 0.5)], onehot_tissue(outside))
    assert same.tobytes() == base.tobytes()
    inside = idx.copy()
    inside[0, 7, 7] = 1 - inside[0, 7, 7]
    changed, _ = net.predict(x_s, None, [(0.5, 0.5)], onehot_tissue(inside))
    assert not np.array_equal(changed, base)


def test_saturated_tissue_prediction_equals_leaked_labels(rng):
    inject = TinyNet("pred-to-input", seed=4)
    # zero head weights and a large bias: the tissue softmax is one-hot CA everywhere
    inject.params["tissue.head.w"][:] = 0.0
    inject.params["tissue.head.b"][:] = [-40.0, 40.0]
    leak = TinyNet("tissue-label-leaking", seed=5)
    for k in leak.params:
        leak.params[k] = inject.params[k].copy()
    x_s, x_l = inputs(rng)
    all_ca = onehot_tissue(np.ones((2, 16, 16), int))
    a, t = inject.predict(x_s, x_l, CENTERS)
    np.testing.assert_allclose(t[:, 1], 1.0, atol=1e-30)
    b, _ = leak.predict(x_s, x_l, CENTERS, all_ca)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


def test_sixty_four_sharing_configs():
    configs = enumerate_sharing_configs()
    assert len(configs) == 64 and len(set(configs)) == 64
    assert configs == enumerate_sharing_configs()
    assert ModelVariant(Kind.FEATURE_SHARING, ("none",) * 3) in configs
    with pytest.raises(ValueError):
        ModelVariant(Kind.FEATURE_SHARING, ("both", "none"))


@pytest.mark.parametrize("text, name", [("PredToInter2", "pred-to-inter-2"), ("cell_only", "cell-only"),
                                        ("feature-sharing:t2c,none,both", "feature-sharing:t2c,none,both")])
def test_variant_parsing(text, name):
    assert ModelVariant.parse(text).name == name


def test_unknown_variant():
    with pytest.raises(ValueError, match="unknown variant"):
        ModelVariant.parse("pred-to-nowhere")


@pytest.mark.parametrize("variant", [v.name for v in ALL_BASE_VARIANTS] + ["feature-sharing:both,both,both",
                                                                           "feature-sharing:t2c,c2t,none"])
def test_gradients_match_finite_differences(variant):
    res = grad_check(variant, seed=0)
    assert res["n_checked"] >= 200
    assert all(n > 0 for n in res["coverage"].values())
    assert res["max_relative_error"] < 1e-4


@pytest.mark.parametrize("c_in, c_out, stride", [(2, 3, 1), (3, 2, 1), (2, 3, 2)])
def test_linear_toy_gradient_is_exact(c_in, c_out, stride, rng):
    # a single convolution is linear in its weights, so central differences are exact; integer data,
    # dyadic weights and a power-of-two step keep every float operation exact as well
    x = rng.integers(-3, 4, size=(1, c_in, 4, 4)).astype(float)
    w0 = rng.integers(-64, 65, size=(c_out, c_in, 3, 3)) / 64.0
    b0 = rng.integers(-64, 65, size=c_out) / 64.0
    probe = rng.integers(-3, 4, size=(1, c_out, 4 // stride, 4 // stride)).astype(float)

    def f(w, b):
        y = ag.conv2d(ag.const(x), ag.Var(w), ag.Var(b), stride)
        return math.fsum((y.value * probe).ravel())

    wv, bv = ag.Var(w0), ag.Var(b0)
    ag.backward(ag.conv2d(ag.const(x), wv, bv, stride), probe)
    h, worst = 2.0 ** -17, 0.0
    for arr, grad in ((w0, wv.grad), (b0, bv.grad)):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = f(w0, b0)
            arr[idx] = orig - h
            fm = f(w0, b0)
            arr[idx] = orig
            worst = max(worst, relative_error(grad[idx], (fp - fm) / (2 * h)))
    assert worst < 1e-9


def test_dice_examples():
    t = np.zeros((1, 2, 2, 2))
    t[0, 0, 0, :] = 1
    t[0, 1, 1, :] = 1
    assert dice_loss(t, t) == pytest.approx(0.0, abs=1e-6)
    # uniform 1/2 against two channels of 2 positives each on a 2x2 grid:
    # per channel 1 - (2 * 1 + eps) / (2 + 2 + eps)
    eps = 1e-6
    assert dice_loss(np.full_like(t, 0.5), t) == pytest.approx(1 - (2 + eps) / (4 + eps), abs=1e-12)
    assert dice_loss(t[:, ::-1], t) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        dice_loss(t, t[:, :1])


def _single_sample_batch(rng):
    return _random_batch(rng, NetSpec(), 1, 16, 16, np.float64)


def test_zero_learning_rate_keeps_weights(rng):
    net = TinyNet("pred-to-inter-1", seed=0)
    before = {k: v.copy() for k, v in net.params.items()}
    train_step(net, _single_sample_batch(rng), Adam(0.0, 0.0), np.random.default_rng(0))
    assert all(np.array_equal(before[k], net.params[k]) for k in before)


def test_per_branch_learning_rates(rng):
    net = TinyNet("pred-to-inter-1", seed=0)
    before = {k: v.copy() for k, v in net.params.items()}
    train_step(net, _single_sample_batch(rng), Adam(0.0, 1e-3), np.random.default_rng(0))
    moved = {k for k in before if not np.array_equal(before[k], net.params[k])}
    assert moved and all(net.param_group(k) == "tissue" for k in moved)


def test_loss_decreases_on_one_sample(rng):
    net = TinyNet("pred-to-inter-2", NetSpec(cell=BranchSpec(dropout=0.0), tissue=BranchSpec(dropout=0.0)), seed=0)
    batch = _single_sample_batch(rng)
    opt = Adam(2e-3, 2e-3)
    losses = [sum(x for x in train_step(net, batch, opt, np.random.default_rng(i)) if x is not None)
              for i in range(50)]
    assert losses[-1] < 0.8 * losses[0]


def test_training_is_deterministic(rng):
    batch = _single_sample_batch(rng)
    nets = []
    for _ in range(2):
        net = TinyNet("feature-sharing:both,none,c2t", seed=9)
        opt = Adam()
        step_rng = np.random.default_rng(1)
        for _ in range(3):
            train_step(net, batch, opt, step_rng)
        nets.append(net)
    assert all(nets[0].params[k].tobytes() == nets[1].params[k].tobytes() for k in nets[0].params)


def test_nan_loss_aborts_with_diagnostics(rng):
    net = TinyNet("cell-only", seed=0)
    batch = _single_sample_batch(rng)
    batch.x_s[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite loss"):
        train_step(net, batch, Adam(), np.random.default_rng(0))


def test_save_load_roundtrip(tmp_path, rng):
    net = TinyNet("feature-sharing:t2c,both,none", seed=11)
    bin_path, json_path = net.save(tmp_path / "w")
    assert bin_path.stat().st_size == 8 * net.n_params()
    back = TinyNet.load(tmp_path / "w")
    assert back.variant == net.variant and back.spec == net.spec
    x_s, x_l = inputs(rng)
    assert back.predict(x_s, x_l, CENTERS)[0].tobytes() == net.predict(x_s, x_l, CENTERS)[0].tobytes()
    bin_path.write_bytes(bin_path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        TinyNet.load(tmp_path / "w")

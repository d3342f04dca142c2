import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segreweight import dataio, losses, metareweight as mr, noisegen as ng, segnet
from segreweight.errors import ContractError
from segreweight.ndcore import OptimState, backward, ops, sgd_step
from segreweight.ndcore.autodiff import Var
from segreweight.segnet import NetConfig

from oracles import fd_weight_grad, per_pixel_weight_grad

TINY = NetConfig(depth=1, base_channels=2, image_side=8, init_sigma=0.5, seed=0)


def tiny_problem(seed, b_noisy=1, b_clean=2, cfg=TINY):
    rng = np.random.default_rng(seed)
    params = segnet.init_params(NetConfig(**{**cfg.to_dict(), "seed": seed}))
    params = {k: v + (0.1 * rng.standard_normal(v.shape) if k.endswith(".b") else 0.0) for k, v in params.items()}
    side = cfg.image_side
    noisy = mr.Batch(rng.standard_normal((b_noisy, 3, side, side)), rng.integers(0, 2, (b_noisy, side, side)))
    clean = mr.Batch(rng.standard_normal((b_clean, 3, side, side)), rng.integers(0, 2, (b_clean, side, side)))
    return params, noisy, clean


def per_pixel_backward_map(params, noisy, clean, alpha, cfg=TINY):
    return per_pixel_weight_grad(params, noisy, clean, alpha, cfg)


# -- virtual step ----------------------------------------------------------------

def test_virtual_step_zero_weights_is_identity():
    params, noisy, _ = tiny_problem(0)
    out = mr.virtual_step(params, noisy, np.zeros(noisy.masks.shape), 0.1, TINY)
    assert all(out[k].tobytes() == params[k].tobytes() for k in params)


def test_virtual_step_alpha_zero_is_identity():
    params, noisy, _ = tiny_problem(1)
    W = np.random.default_rng(1).random(noisy.masks.shape)
    out = mr.virtual_step(params, noisy, W, 0.0, TINY)
    assert all(np.array_equal(out[k], params[k]) for k in params)


def test_virtual_step_one_hot_matches_single_pixel_backward():
    params, noisy, _ = tiny_problem(2)
    W = np.zeros(noisy.masks.shape)
    W[0, 3, 5] = 1.0
    out = mr.virtual_step(params, noisy, W, 0.1, TINY)

    keys = list(params)
    leaves = [Var(params[k], requires_grad=True) for k in keys]
    lm = losses.pixel_ce(segnet.forward(dict(zip(keys, leaves)), noisy.images, TINY), noisy.masks)
    seed = np.zeros(lm.value.shape)
    seed[0, 3, 5] = 1.0
    for k, g in zip(keys, backward(lm, leaves, seed)):
        np.testing.assert_allclose(out[k], params[k] - 0.1 * g, rtol=1e-13, atol=1e-15)


def test_virtual_step_shape_mismatch():
    params, noisy, _ = tiny_problem(0)
    with pytest.raises(ContractError):
        mr.virtual_step(params, noisy, np.zeros((1, 4, 4)), 0.1, TINY)


# -- weight gradient -------------------------------------------------------------

def scalar_weight_grad(theta, y_n, y_c, alpha):
    params = {"theta": np.array(theta)}

    def lossmap(p):
        d = ops.sub(p["theta"], np.array(y_n))
        return ops.mul(d, d)

    def clean(p):
        d = ops.sub(p["theta"], np.array(y_c))
        return ops.total(ops.mul(d, d))

    return mr.lookahead_weight_grad(lossmap, clean, params, params, alpha)[0]


def test_scalar_worked_example_exact():
    assert float(scalar_weight_grad(0.0, 1.0, -1.0, 0.1)) == 0.4


def test_scalar_worked_example_finite_differences():
    alpha, y_n, y_c, h = 0.1, 1.0, -1.0, 1e-5

    def composed(w):
        theta_hat = 0.0 - alpha * w * 2 * (0.0 - y_n)
        return (theta_hat - y_c) ** 2

    fd = (composed(h) - composed(-h)) / (2 * h)
    assert fd == pytest.approx(0.4, rel=1e-9)
    assert float(scalar_weight_grad(0.0, y_n, y_c, alpha)) == pytest.approx(fd, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.001, 1))
def test_scalar_closed_form(theta, y_n, y_c, alpha):
    expect = -4 * alpha * (theta - y_c) * (theta - y_n)
    assert float(scalar_weight_grad(theta, y_n, y_c, alpha)) == pytest.approx(expect, rel=1e-12, abs=1e-12)


def test_zero_clean_gradient_gives_zero_map():
    params, noisy, _ = tiny_problem(0)
    lossmap = lambda p: losses.pixel_ce(segnet.forward(p, noisy.images, TINY), noisy.masks)
    gmap, _ = mr.lookahead_weight_grad(lossmap, lambda p: np.asarray(1.5), params, params, 0.1)
    assert gmap.shape == noisy.masks.shape and np.all(gmap == 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_weight_grad_matches_per_pixel_backward(seed):
    params, noisy, clean = tiny_problem(seed)
    theta_hat = mr.virtual_step(params, noisy, np.zeros(noisy.masks.shape), 0.1, TINY)
    got = mr.weight_grad(params, theta_hat, noisy, clean, 0.1, TINY)
    ref = per_pixel_backward_map(params, noisy, clean, 0.1)
    assert np.max(np.abs(got - ref)) <= 1e-10 * np.max(np.abs(ref))


def test_weight_grad_matches_finite_differences_of_composed_map():
    params, noisy, clean = tiny_problem(4)
    alpha, h = 0.1, 1e-6
    got = mr.weight_grad(params, params, noisy, clean, alpha, TINY)
    scale = np.max(np.abs(got))
    pixels = [(0, 0, 0), (0, 3, 4), (0, 7, 7), (0, 5, 1), (0, 2, 6)]
    fd = fd_weight_grad(params, noisy, clean, alpha, TINY, h, pixels)
    for idx in pixels:
        assert abs(got[idx] - fd[idx]) <= 1e-5 * max(abs(fd[idx]), 1e-3 * scale)


def test_weight_grad_structure_mismatch():
    params, noisy, clean = tiny_problem(0)
    bad = {k: v for k, v in list(params.items())[:-1]}
    with pytest.raises(ContractError):
        mr.weight_grad(params, bad, noisy, clean, 0.1, TINY)


# -- rectify / normalize -----------------------------------------------------------

def test_rectify_all_negative():
    assert np.array_equal(mr.rectify_normalize([-1.0, -2.0, -3.0]), [0.0, 0.0, 0.0])


def test_rectify_mixed():
    np.testing.assert_allclose(mr.rectify_normalize([-1.0, 2.0, 3.0]), [0.0, 0.4, 0.6], rtol=1e-15)


def test_rectify_single():
    assert np.array_equal(mr.rectify_normalize([5.0]), [1.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_rectify_invariants(seed):
    U = np.random.default_rng(seed).standard_normal((2, 4, 4))
    W = mr.rectify_normalize(U)
    assert np.all(W >= 0)
    assert np.all(W[U <= 0] == 0)
    assert abs(W.sum() - 1) < 1e-9


def test_per_image_weights_spread_evenly():
    U = np.stack([np.full((3, 3), 2.0), np.full((3, 3), -1.0), np.full((3, 3), 6.0)])
    W = mr.per_image_weights(U)
    np.testing.assert_allclose(W[0], 0.25 / 9)
    assert np.all(W[1] == 0)
    np.testing.assert_allclose(W[2], 0.75 / 9)
    assert W.sum() == pytest.approx(1.0, abs=1e-12)


# -- train step -------------------------------------------------------------------

def fresh_state(params, alpha=0.05, eta=0.05, momentum=0.9, wd=5e-5):
    opt = OptimState.for_params(params, alpha, momentum, wd)
    return mr.TrainState({k: v.copy() for k, v in params.items()}, opt, alpha=alpha, eta=eta)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_train_step_weight_map_invariants(seed):
    params, noisy, clean = tiny_problem(seed, b_noisy=2)
    info = mr.train_step(fresh_state(params), noisy, clean, TINY)
    W = info.weights
    assert W.shape == noisy.masks.shape
    assert np.all(W >= 0)
    assert np.all(W == 0) or abs(W.sum() - 1) < 1e-9
    assert np.all(W[info.weight_grad > 0] == 0)


def test_null_learning_leaves_only_optimizer_terms():
    params, noisy, clean = tiny_problem(3)
    state = fresh_state(params, alpha=0.0, eta=0.0)
    info = mr.train_step(state, noisy, clean, TINY)
    assert np.all(info.weights == 0)
    assert all(np.array_equal(state.params[k], params[k]) for k in params)


def test_zero_weights_apply_zero_gradient_sgd_step():
    params, noisy, clean = tiny_problem(5)
    rng = np.random.default_rng(5)
    state = fresh_state(params, alpha=0.05, eta=0.0)
    state.opt.velocity = {k: rng.standard_normal(v.shape) for k, v in params.items()}
    ref_opt = OptimState(0.05, 0.9, 5e-5, {k: v.copy() for k, v in state.opt.velocity.items()})
    expect, _ = sgd_step(params, {k: np.zeros_like(v) for k, v in params.items()}, ref_opt)
    info = mr.train_step(state, noisy, clean, TINY)
    assert np.all(info.weights == 0)
    for k in params:
        np.testing.assert_array_equal(state.params[k], expect[k])
    assert any(not np.array_equal(state.params[k], params[k]) for k in params)


def test_complement_labels_zero_weight_where_oracle_gradient_positive():
    params, _, clean = tiny_problem(6, b_clean=1)
    noisy = mr.Batch(clean.images.copy(), 1 - clean.masks)
    info = mr.train_step(fresh_state(params), noisy, clean, TINY)
    oracle = per_pixel_backward_map(params, noisy, clean, 0.05)
    positive = oracle > 0
    assert positive.any()
    assert np.all(info.weights[positive] == 0)
    assert np.array_equal(info.weights > 0, oracle < 0)


def test_consistent_labels_concentrate_weight_and_loss_decreases():
    cfg = NetConfig(depth=1, base_channels=4, image_side=16, init_sigma=0.3, seed=0)
    sample = dataio.gen_synthetic(1, 16, seed=0)[0]
    x = dataio.normalize(sample.image[None], dataio.NormStats.from_images(sample.image[None]))
    batch = mr.Batch(x, sample.clean_mask[None].astype(int))
    params = segnet.init_params(cfg)
    state = fresh_state(params, alpha=0.05, eta=0.05, momentum=0.9)

    def loss():
        return float(losses.clean_loss(segnet.forward(state.params, x, cfg), batch.masks))

    start = loss()
    for _ in range(50):
        info = mr.train_step(state, batch, batch, cfg)
        assert abs(info.weights.sum() - 1) < 1e-9
        # all mass sits on pixels whose loss gradient helps the clean loss
        assert np.all(info.weight_grad[info.weights > 0] < 0)
    assert loss() < 0.75 * start


def test_per_image_matches_pixel_mode_for_uniform_maps():
    params, noisy, clean = tiny_problem(7, b_noisy=2)
    levels = np.array([-3.0, -1.0])

    def uniform_map(theta, theta_hat, nb, cb, alpha, cfg, return_clean_loss=False):
        gmap = np.broadcast_to(levels[:, None, None], nb.masks.shape).copy()
        return (gmap, 0.0) if return_clean_loss else gmap

    a, b = fresh_state(params), fresh_state(params)
    for _ in range(3):
        wa = mr.train_step(a, noisy, clean, TINY, "pixel", weight_grad_fn=uniform_map).weights
        wb = mr.train_step(b, noisy, clean, TINY, "image", weight_grad_fn=uniform_map).weights
        np.testing.assert_allclose(wa, wb, rtol=1e-14)
    for k in params:
        np.testing.assert_allclose(a.params[k], b.params[k], rtol=1e-12, atol=1e-15)


def test_unknown_granularity():
    params, noisy, clean = tiny_problem(0)
    with pytest.raises(ContractError):
        mr.train_step(fresh_state(params), noisy, clean, TINY, "region")


# -- training loops -----------------------------------------------------------------

@pytest.fixture(scope="module")
def small_split():
    samples = dataio.gen_synthetic(30, 16, seed=0)
    return dataio.make_splits(samples, 4, 20, ng.NoiseSpec.parse("k_vertex:3"), n_val=3, n_test=3, seed=0)


SMALL = NetConfig(depth=1, base_channels=2, image_side=16, seed=0)


def quick_hyper(**kw):
    base = dict(alpha=1e-3, eta=1e-3, iterations=6, eval_interval=2, batch_clean=3)
    base.update(kw)
    return mr.Hyper(**base)


def test_plain_zero_iterations_returns_initial_params(small_split):
    state = mr.train(small_split, SMALL, quick_hyper(iterations=0), "plain")
    init = segnet.init_params(SMALL)
    assert all(np.array_equal(state.params[k], init[k]) for k in init)
    assert [r["iteration"] for r in state.records] == [0]


@pytest.mark.parametrize("mode", mr.MODES)
def test_training_is_deterministic(small_split, mode):
    a = mr.train(small_split, SMALL, quick_hyper(), mode)
    b = mr.train(small_split, SMALL, quick_hyper(), mode)
    assert a.records == b.records
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert [r["iteration"] for r in a.records] == [0, 2, 4, 6]


def test_resume_reproduces_run(small_split, tmp_path):
    h = quick_hyper(iterations=8)
    full = mr.train(small_split, SMALL, h, "reweight")
    part = mr.train(small_split, SMALL, h, "reweight", stop_at=3)
    part.save(tmp_path / "ck")
    resumed = mr.train(small_split, SMALL, h, "reweight", state=mr.TrainState.load(tmp_path / "ck"))
    assert resumed.records == full.records
    assert all(resumed.params[k].tobytes() == full.params[k].tobytes() for k in full.params)
    assert all(resumed.opt.velocity[k].tobytes() == full.opt.velocity[k].tobytes() for k in full.params)


def test_fine_tune_schedule(small_split):
    state = mr.train(small_split, SMALL, quick_hyper(iterations=6, fine_tune_fraction=0.5), "fine_tune")
    noisy, clean = state.history["noisy_loss"], state.history["clean_loss"]
    assert all(v is not None for v in noisy[:3]) and all(v is None for v in noisy[3:])
    assert all(v is None for v in clean[:3]) and all(v is not None for v in clean[3:])


def test_on_step_sees_valid_weight_maps(small_split):
    seen = []

    def hook(state, info):
        seen.append((state.iteration, info.weights.copy()))

    mr.train(small_split, SMALL, quick_hyper(), "reweight", on_step=hook)
    assert [i for i, _ in seen] == list(range(1, 7))
    for _, W in seen:
        assert np.all(W >= 0) and (np.all(W == 0) or abs(W.sum() - 1) < 1e-9)


def test_lr_decay_on_patience(small_split):
    state = mr.train(small_split, SMALL, quick_hyper(iterations=8, eval_interval=1, lr_patience=1), "plain")
    assert state.records[-1]["alpha"] < 1e-3


def test_mode_errors(small_split):
    with pytest.raises(ContractError):
        mr.train(small_split, SMALL, quick_hyper(), "distill")
    no_clean = dataio.make_splits(dataio.gen_synthetic(10, 16), 0, 8, ng.NoiseSpec.parse("none"))
    with pytest.raises(ContractError):
        mr.train(no_clean, SMALL, quick_hyper(), "reweight")
    mr.train(no_clean, SMALL, quick_hyper(iterations=2), "plain")


@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(eta=-1.0), dict(batch_noisy=0), dict(dtype="float16")])
def test_hyper_validation(kw):
    with pytest.raises(ContractError):
        mr.Hyper(**kw).validate()


def test_hyper_dict_round_trip():
    h = mr.Hyper(alpha=3e-4, iterations=10, lr_patience=4)
    assert mr.hyper_from_dict(mr.hyper_to_dict(h)) == h


def test_weight_statistics_keys(small_split):
    pools = mr.Pools.from_split(small_split)
    params = segnet.init_params(SMALL)
    stats = mr.weight_statistics(params, pools, SMALL, quick_hyper(), n_batches=2)
    assert set(stats) == {"mislabelled", "correct"}
    assert all(v >= 0 for v in stats.values())

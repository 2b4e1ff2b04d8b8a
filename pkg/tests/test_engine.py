"""Engine-level checks: forward semantics, gradient correctness against a
central finite-difference oracle, determinism, and the gradient-call counter.
"""

import numpy as np
import pytest

from camaudit import engine
from camaudit.engine import (Conv2D, Dense, Flatten, Identity, Network,
                             ReLU, ShapeMismatchError, UnknownTapError,
                             backward_from_class, finite_diff_grad, forward)
from camaudit.model import build_model

from conftest import micro_config, random_input


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------------------
# forward


def test_conv_relu_hand_example():
    # 1x1 conv, weight 2, bias 0, relu on [[1,-1],[3,0]] -> [[2,0],[6,0]]
    conv = Conv2D(1, 1, 1, 1, rng=np.random.default_rng(0))
    conv.w[...] = 2.0
    conv.b[...] = 0.0
    net = Network([("conv", conv), ("relu", ReLU()), ("flat", Flatten()),
                   ("out", _fixed_dense(4, 2))], taps={"T": 1})
    trace = forward(net, np.array([[1.0, -1.0], [3.0, 0.0]]))
    np.testing.assert_array_equal(trace.taps["T"][:, :, 0],
                                  [[2.0, 0.0], [6.0, 0.0]])


def _fixed_dense(n_in, n_out, value=0.5):
    d = Dense(n_in, n_out, rng=np.random.default_rng(1))
    d.w[...] = value
    return d


def test_zero_classifier_gives_uniform_posteriors(micro_model):
    head = micro_model.stages[-1][1]
    head.v[...] = 0.0
    trace = forward(micro_model, random_input(np.random.default_rng(0)))
    np.testing.assert_allclose(trace.posteriors, np.full(5, 0.2), atol=1e-12)


def test_posteriors_sum_to_one(micro_model):
    rng = np.random.default_rng(1)
    for _ in range(5):
        trace = forward(micro_model, random_input(rng))
        assert abs(trace.posteriors.sum() - 1.0) < 1e-9
        assert np.all(trace.posteriors >= 0.0)


def test_forward_rejects_wrong_freq_bins(micro_model):
    with pytest.raises(ShapeMismatchError, match="expected 8 frequency bins"):
        forward(micro_model, np.zeros((9, 12)))


def test_forward_accepts_other_frame_counts(micro_model):
    # time axis is pooled out, so trimmed or concatenated inputs are legal
    for frames in (5, 12, 40):
        trace = forward(micro_model, np.zeros((8, frames)))
        assert trace.posteriors.shape == (5,)


def test_every_tap_present_and_finite(micro_model):
    trace = forward(micro_model, random_input(np.random.default_rng(2)))
    assert list(trace.taps) == ["S1", "S2", "S3", "S4"]
    for arr in trace.taps.values():
        assert np.all(np.isfinite(arr))


def test_forward_deterministic_and_tap_copies(micro_model):
    x = random_input(np.random.default_rng(3))
    t1 = forward(micro_model, x)
    t2 = forward(micro_model, x)
    for name in t1.taps:
        assert np.array_equal(t1.taps[name], t2.taps[name])
    assert np.array_equal(t1.logits, t2.logits)
    # traces hold copies: mutating the model must not change them
    saved = t1.taps["S4"].copy()
    micro_model.stages[0][1].w[...] += 1.0
    assert np.array_equal(t1.taps["S4"], saved)


# ---------------------------------------------------------------------------
# backward


def test_zero_downstream_weights_give_zero_tap_gradient(micro_model):
    for name in ("embed", "classifier"):
        layer = dict(micro_model.stages)[name]
        for _, arr in layer.param_items():
            arr[...] = 0.0
    trace = forward(micro_model, random_input(np.random.default_rng(4)))
    grads = backward_from_class(micro_model, trace, class_id=1)
    np.testing.assert_array_equal(grads.taps["S4"],
                                  np.zeros_like(trace.taps["S4"]))


def test_dense_logit_gradient_is_weight_row():
    # tap feeds a dense layer producing logits; d logit_c / d tap = column c
    rng = np.random.default_rng(5)
    dense = Dense(6, 3, rng=rng)
    net = Network([("in", Identity()), ("flat", Flatten()),
                   ("out", dense)], taps={"T": 0})
    x = rng.normal(size=(2, 3))
    trace = forward(net, x)
    g = backward_from_class(net, trace, class_id=2, score_kind="logit")
    np.testing.assert_allclose(g.taps["T"].ravel(), dense.w[:, 2], atol=1e-15)


def test_class_id_out_of_range_rejected(micro_model):
    trace = forward(micro_model, random_input(np.random.default_rng(6)))
    with pytest.raises(ValueError, match="out of range"):
        backward_from_class(micro_model, trace, class_id=5)


def test_relu_backward_zero_exactly_where_output_zero():
    relu = ReLU()
    x = np.array([[-1.0, 0.0, 2.0, -0.5, 3.0]])
    y, cache = relu.forward(x)
    g, _ = relu.backward(np.ones_like(x), cache)
    np.testing.assert_array_equal((y == 0.0), (g == 0.0))


def probe_locations(rng, shape, n):
    return [tuple(int(rng.integers(0, s)) for s in shape) for _ in range(n)]


@pytest.mark.parametrize("score_kind", ["posterior", "logit"])
def test_gradients_match_finite_differences(score_kind):
    model = build_model(micro_config(seed=11))
    rng = np.random.default_rng(7)
    x = random_input(rng)
    trace = forward(model, x)
    class_id = 3
    grads = backward_from_class(model, trace, class_id, score_kind=score_kind)
    checked = 0
    for tap in ("S1", "S2", "S3", "S4"):
        for loc in probe_locations(rng, trace.taps[tap].shape, 6):
            fd = finite_diff_grad(model, x, class_id, tap, loc,
                                  epsilon=1e-5, score_kind=score_kind)
            an = float(grads.taps[tap][loc])
            if max(abs(fd), abs(an)) < 1e-7:
                assert abs(fd - an) < 1e-8
            else:
                assert rel_err(an, fd) < 1e-4, (tap, loc, an, fd)
                checked += 1
    assert checked >= 10


def test_gradcheck_covers_softmax_head():
    model = build_model(micro_config(loss_kind="softmax", seed=12))
    rng = np.random.default_rng(8)
    x = random_input(rng)
    trace = forward(model, x)
    grads = backward_from_class(model, trace, 0)
    for loc in probe_locations(rng, trace.taps["S3"].shape, 8):
        fd = finite_diff_grad(model, x, 0, "S3", loc)
        an = float(grads.taps["S3"][loc])
        if max(abs(fd), abs(an)) >= 1e-7:
            assert rel_err(an, fd) < 1e-4


# ---------------------------------------------------------------------------
# finite_diff_grad on its own


def test_finite_diff_zero_for_constant_output(micro_model):
    for name in ("embed", "classifier"):
        layer = dict(micro_model.stages)[name]
        for _, arr in layer.param_items():
            arr[...] = 0.0
    x = random_input(np.random.default_rng(9))
    assert finite_diff_grad(micro_model, x, 0, "S2", (0, 0, 0)) == 0.0


def test_finite_diff_linear_case_recovers_weight():
    rng = np.random.default_rng(10)
    dense = Dense(4, 2, rng=rng)
    net = Network([("in", Identity()), ("flat", Flatten()),
                   ("out", dense)], taps={"T": 0})
    x = rng.normal(size=(2, 2))
    fd = finite_diff_grad(net, x, 1, "T", (1, 0, 0), epsilon=1e-5,
                          score_kind="logit")
    # flattened index of (1, 0) in a (2, 2, 1) tap is 2
    assert abs(fd - dense.w[2, 1]) < 1e-9


def test_finite_diff_rejects_unknown_tap(micro_model):
    with pytest.raises(UnknownTapError, match="registered taps"):
        finite_diff_grad(micro_model, np.zeros((8, 12)), 0, "S9", (0, 0, 0))


def test_finite_diff_rejects_bad_epsilon_and_location(micro_model):
    x = np.zeros((8, 12))
    with pytest.raises(ValueError, match="epsilon"):
        finite_diff_grad(micro_model, x, 0, "S1", (0, 0, 0), epsilon=0.0)
    with pytest.raises(ValueError, match="outside tap"):
        finite_diff_grad(micro_model, x, 0, "S4", (50, 0, 0))


# ---------------------------------------------------------------------------
# instrumentation


def test_gradient_counter_counts_backward_only(micro_model):
    x = random_input(np.random.default_rng(11))
    assert micro_model.grad_calls == 0
    trace = forward(micro_model, x)
    engine.predict_batch(micro_model, x[None])
    assert micro_model.grad_calls == 0
    backward_from_class(micro_model, trace, 0)
    backward_from_class(micro_model, trace, 1)
    assert micro_model.grad_calls == 2


def test_backward_deterministic(micro_model):
    x = random_input(np.random.default_rng(12))
    trace = forward(micro_model, x)
    g1 = backward_from_class(micro_model, trace, 2)
    g2 = backward_from_class(micro_model, trace, 2)
    for tap in g1.taps:
        assert np.array_equal(g1.taps[tap], g2.taps[tap])

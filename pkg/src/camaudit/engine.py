"""Minimal dense-tensor neural-network engine with reverse-mode differentiation.

Everything is float64 numpy. Activations travel as NHWC batches
(batch, freq, time, channels); vector stages use (batch, features).
Layers hold parameters only: ``forward`` returns ``(output, cache)`` and
``backward`` consumes that cache, so layers stay stateless between calls and
a network can serve concurrent inference on distinct inputs.

A :class:`Network` is an ordered list of stages plus named taps. A tap
captures the (deep-copied) output of one stage during :func:`forward`, and
:func:`backward_from_class` returns the gradient of a chosen class score at
every tap. ``Network.grad_calls`` counts backward passes, which lets callers
prove that a code path never touched gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    """Input dimensions do not match what the network expects."""


class UnknownTapError(ValueError):
    """A tap name was requested that the network never registered."""


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically-stable softmax over the last axis."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _same_pad(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) padding for 'same' convolution.

    Output is ceil(size / stride); asymmetric padding puts the extra row
    after, so even inputs under stride 2 pad only on the trailing edge.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    before = total // 2
    return out, before, total - before


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Layers


class Identity:
    """Pass-through stage, handy for composing small test networks."""

    def param_items(self):
        return []

    def forward(self, x):
        return x, None

    def backward(self, g, cache):
        return g, {}


class ReLU:
    def param_items(self):
        return []

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, g, cache):
        # gradient is exactly zero wherever the forward output was zero
        return g * (cache > 0.0), {}


class Sigmoid:
    def param_items(self):
        return []

    def forward(self, x):
        y = 1.0 / (1.0 + np.exp(-x))
        return y, y

    def backward(self, g, cache):
        return g * cache * (1.0 - cache), {}


class Dense:
    """Affine map on (batch, features)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.w = he_uniform(rng, (n_in, n_out), fan_in=n_in)
        self.b = np.zeros(n_out)

    def param_items(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, x):
        return x @ self.w + self.b, x

    def backward(self, g, cache):
        x = cache
        grads = {"w": x.T @ g, "b": g.sum(axis=0)}
        return g @ self.w.T, grads


class Conv2D:
    """Direct 2-D convolution, 'same' padding, configurable stride.

    Weight layout is (kh, kw, c_in, c_out). The spatial loop runs over the
    kernel offsets in a fixed order with one channel-matmul per offset,
    which keeps the summation order, and therefore the output bits,
    reproducible, and keeps working sets small enough for the cache.
    """

    def __init__(self, kh: int, kw: int, c_in: int, c_out: int,
                 stride: int = 1, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.kh, self.kw = kh, kw
        self.c_in, self.c_out = c_in, c_out
        self.stride = stride
        self.w = he_uniform(rng, (kh, kw, c_in, c_out), fan_in=kh * kw * c_in)
        self.b = np.zeros(c_out)

    def param_items(self):
        return [("w", self.w), ("b", self.b)]

    def _geometry(self, h: int, wd: int):
        ho, pt, pb = _same_pad(h, self.kh, self.stride)
        wo, pl, pr = _same_pad(wd, self.kw, self.stride)
        return ho, wo, (pt, pb), (pl, pr)

    def _offset_slice(self, xp, dy, dx, ho, wo):
        s = self.stride
        return xp[:, dy:dy + s * (ho - 1) + 1:s,
                  dx:dx + s * (wo - 1) + 1:s, :]

    def forward(self, x):
        n, h, wd, _ = x.shape
        ho, wo, (pt, pb), (pl, pr) = self._geometry(h, wd)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        acc = np.zeros((n * ho * wo, self.c_out))
        for dy in range(self.kh):
            for dx in range(self.kw):
                sl = self._offset_slice(xp, dy, dx, ho, wo)
                acc += sl.reshape(-1, self.c_in) @ self.w[dy, dx]
        acc += self.b
        return acc.reshape(n, ho, wo, self.c_out), (xp, x.shape)

    def backward(self, g, cache):
        xp, x_shape = cache
        n, h, wd, _ = x_shape
        ho, wo, (pt, _), (pl, _) = self._geometry(h, wd)
        gf = g.reshape(-1, self.c_out)
        dw = np.empty_like(self.w)
        dxp = np.zeros_like(xp)
        for dy in range(self.kh):
            for dx in range(self.kw):
                sl = self._offset_slice(xp, dy, dx, ho, wo)
                dw[dy, dx] = sl.reshape(-1, self.c_in).T @ gf
                self._offset_slice(dxp, dy, dx, ho, wo)[...] += (
                    gf @ self.w[dy, dx].T).reshape(n, ho, wo, self.c_in)
        dx = dxp[:, pt:pt + h, pl:pl + wd, :]
        grads = {"w": dw, "b": gf.sum(axis=0)}
        return dx, grads


class SEScale:
    """Squeeze-and-excitation channel gating.

    Global average pool over space, a two-layer bottleneck (relu then
    sigmoid), and a per-channel multiplicative gate on the input.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 reduction: int = 4):
        hidden = max(channels // reduction, 1)
        self.w1 = he_uniform(rng, (channels, hidden), fan_in=channels)
        self.b1 = np.zeros(hidden)
        self.w2 = he_uniform(rng, (hidden, channels), fan_in=hidden)
        self.b2 = np.zeros(channels)

    def param_items(self):
        return [("w1", self.w1), ("b1", self.b1),
                ("w2", self.w2), ("b2", self.b2)]

    def forward(self, x):
        _, h, wd, _ = x.shape
        m = x.mean(axis=(1, 2))                      # (n, c)
        h_pre = m @ self.w1 + self.b1
        h_act = np.maximum(h_pre, 0.0)
        g_pre = h_act @ self.w2 + self.b2
        gate = 1.0 / (1.0 + np.exp(-g_pre))          # (n, c)
        y = x * gate[:, None, None, :]
        return y, (x, m, h_pre, h_act, gate, h * wd)

    def backward(self, g, cache):
        x, m, h_pre, h_act, gate, area = cache
        dgate = (g * x).sum(axis=(1, 2))
        dx = g * gate[:, None, None, :]
        dg_pre = dgate * gate * (1.0 - gate)
        dw2 = h_act.T @ dg_pre
        db2 = dg_pre.sum(axis=0)
        dh_act = dg_pre @ self.w2.T
        dh_pre = dh_act * (h_pre > 0.0)
        dw1 = m.T @ dh_pre
        db1 = dh_pre.sum(axis=0)
        dm = dh_pre @ self.w1.T
        dx += dm[:, None, None, :] / area
        grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
        return dx, grads


class TemporalStatsPool:
    """Mean and standard deviation over the time axis.

    (n, f, t, c) -> (n, f, 2, c) with the mean in slot 0 and the
    population standard deviation (epsilon-guarded) in slot 1.
    """

    EPS = 1e-8

    def param_items(self):
        return []

    def forward(self, x):
        t = x.shape[2]
        m = x.mean(axis=2)
        xc = x - m[:, :, None, :]
        v = (xc * xc).mean(axis=2)
        sd = np.sqrt(v + self.EPS)
        y = np.stack([m, sd], axis=2)
        return y, (xc, sd, t)

    def backward(self, g, cache):
        xc, sd, t = cache
        dm = g[:, :, 0, :]
        dsd = g[:, :, 1, :]
        dv = dsd / (2.0 * sd)
        dx = dm[:, :, None, :] / t + (2.0 / t) * xc * dv[:, :, None, :]
        return dx, {}


class Flatten:
    def param_items(self):
        return []

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, g, cache):
        return g.reshape(cache), {}


class CosineClassifier:
    """Scaled cosine similarity between the embedding and class weights.

    Rows of the weight matrix and the input are L2-normalized (with a small
    epsilon under the square root so the zero vector stays differentiable),
    and the cosine matrix is multiplied by a fixed scale.
    """

    EPS = 1e-12

    def __init__(self, n_in: int, n_classes: int, scale: float,
                 rng: np.random.Generator):
        self.v = he_uniform(rng, (n_classes, n_in), fan_in=n_in)
        self.scale = float(scale)

    def param_items(self):
        return [("v", self.v)]

    def forward(self, x):
        xn_norm = np.sqrt((x * x).sum(axis=1) + self.EPS)
        xn = x / xn_norm[:, None]
        vn_norm = np.sqrt((self.v * self.v).sum(axis=1) + self.EPS)
        vn = self.v / vn_norm[:, None]
        y = self.scale * (xn @ vn.T)
        return y, (x, xn, xn_norm, vn, vn_norm)

    def backward(self, g, cache):
        x, xn, xn_norm, vn, vn_norm = cache
        dcos = self.scale * g
        dxn = dcos @ vn
        dvn = dcos.T @ xn
        dx = dxn / xn_norm[:, None] - x * (
            (dxn * x).sum(axis=1) / xn_norm ** 3)[:, None]
        dv = dvn / vn_norm[:, None] - self.v * (
            (dvn * self.v).sum(axis=1) / vn_norm ** 3)[:, None]
        return dx, {"v": dv}


class ResidualUnit:
    """conv-relu-conv-SE with an additive shortcut and a final relu.

    The first convolution carries the unit stride; the shortcut is the
    identity when shapes agree and a strided 1x1 projection otherwise.
    """

    def __init__(self, c_in: int, c_out: int, stride: int,
                 rng: np.random.Generator):
        self.conv1 = Conv2D(3, 3, c_in, c_out, stride=stride, rng=rng)
        self.conv2 = Conv2D(3, 3, c_out, c_out, stride=1, rng=rng)
        self.se = SEScale(c_out, rng=rng)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2D(1, 1, c_in, c_out, stride=stride, rng=rng)
        else:
            self.proj = None

    def param_items(self):
        items = []
        for prefix, layer in self._sublayers():
            items.extend((f"{prefix}/{k}", a) for k, a in layer.param_items())
        return items

    def _sublayers(self):
        subs = [("conv1", self.conv1), ("conv2", self.conv2), ("se", self.se)]
        if self.proj is not None:
            subs.append(("proj", self.proj))
        return subs

    def forward(self, x):
        a, c1 = self.conv1.forward(x)
        r = np.maximum(a, 0.0)
        b, c2 = self.conv2.forward(r)
        d, cse = self.se.forward(b)
        if self.proj is not None:
            sc, cp = self.proj.forward(x)
        else:
            sc, cp = x, None
        e = d + sc
        y = np.maximum(e, 0.0)
        return y, (a, c1, c2, cse, cp, e)

    def backward(self, g, cache):
        a, c1, c2, cse, cp, e = cache
        de = g * (e > 0.0)
        dd, dsc = de, de
        db, gse = self.se.backward(dd, cse)
        dr, g2 = self.conv2.backward(db, c2)
        da = dr * (a > 0.0)
        dx, g1 = self.conv1.backward(da, c1)
        grads = {f"conv1/{k}": v for k, v in g1.items()}
        grads.update({f"conv2/{k}": v for k, v in g2.items()})
        grads.update({f"se/{k}": v for k, v in gse.items()})
        if self.proj is not None:
            dxp, gp = self.proj.backward(dsc, cp)
            dx = dx + dxp
            grads.update({f"proj/{k}": v for k, v in gp.items()})
        else:
            dx = dx + dsc
        return dx, grads


# ---------------------------------------------------------------------------
# Network plumbing


@dataclass
class ActivationTrace:
    """Forward-pass record: tap activations, logits, posteriors.

    Tap tensors are copies with shape (height, width, channels); the trace
    stays valid even if the network parameters are mutated afterwards.
    ``caches`` is engine-internal state that lets a backward pass reuse this
    forward pass.
    """

    taps: dict[str, np.ndarray]
    logits: np.ndarray
    posteriors: np.ndarray
    caches: list = field(repr=False, default_factory=list)


@dataclass
class GradientTrace:
    """Per-tap gradient of one class score, shape-matched to the trace."""

    taps: dict[str, np.ndarray]
    class_id: int
    score_kind: str


class Network:
    """Ordered stages plus named taps.

    ``taps`` maps a tap name to the index of the stage whose output it
    records. ``grad_calls`` counts completed backward passes.
    """

    def __init__(self, stages: list[tuple[str, object]],
                 taps: dict[str, int] | None = None):
        self.stages = stages
        self.taps = dict(taps or {})
        self.grad_calls = 0
        for name, idx in self.taps.items():
            if not 0 <= idx < len(stages):
                raise UnknownTapError(
                    f"tap {name!r} points at stage {idx}, "
                    f"but the network has {len(stages)} stages")

    def param_items(self):
        items = []
        for name, layer in self.stages:
            items.extend((f"{name}/{k}", a) for k, a in layer.param_items())
        return items

    def tap_stage(self, tap: str) -> int:
        try:
            return self.taps[tap]
        except KeyError:
            known = ", ".join(self.taps) or "<none>"
            raise UnknownTapError(
                f"unknown tap {tap!r}; registered taps: {known}") from None


def _as_batch(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatchError(
            f"expected a 2-D (freq, time) input, got shape {x.shape}")
    return x[None, :, :, None]


def _check_input(net: Network, x: np.ndarray) -> None:
    want = getattr(net, "expected_freq_bins", None)
    if want is not None and x.shape[1] != want:
        raise ShapeMismatchError(
            f"expected {want} frequency bins, got {x.shape[1]} "
            f"(input shape {x.shape[1:3]})")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeMismatchError(f"empty spatial axis in input {x.shape}")


def _run_stages(net: Network, x: np.ndarray, start: int = 0):
    caches = []
    for _, layer in net.stages[start:]:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def forward(net: Network, features: np.ndarray) -> ActivationTrace:
    """Run one input through the network, capturing every registered tap.

    Returns logits, softmax posteriors, and a copy of each tap activation
    as (height, width, channels).
    """
    x = _as_batch(features)
    _check_input(net, x)
    tap_of_stage = {idx: name for name, idx in net.taps.items()}
    taps: dict[str, np.ndarray] = {name: None for name in net.taps}
    caches = []
    for i, (_, layer) in enumerate(net.stages):
        x, cache = layer.forward(x)
        caches.append(cache)
        if i in tap_of_stage:
            taps[tap_of_stage[i]] = x[0].copy()
    logits = x[0].copy()
    return ActivationTrace(taps=taps, logits=logits,
                           posteriors=softmax(logits), caches=caches)


def predict_batch(net: Network, inputs: np.ndarray) -> np.ndarray:
    """Posteriors for a batch of same-shaped inputs.

    ``inputs`` is (n, freq, time) or (n, freq, time, 1).
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, :, :, None]
    _check_input(net, x)
    y, _ = _run_stages(net, x)
    return softmax(y)


def _score_seed(trace_posteriors: np.ndarray, class_id: int,
                score_kind: str) -> np.ndarray:
    """Gradient of the selected score with respect to the logits."""
    k = trace_posteriors.shape[-1]
    if not 0 <= class_id < k:
        raise ValueError(f"class id {class_id} out of range [0, {k})")
    if score_kind == "logit":
        seed = np.zeros(k)
        seed[class_id] = 1.0
        return seed
    if score_kind == "posterior":
        p = trace_posteriors
        seed = -p[class_id] * p
        seed[class_id] += p[class_id]
        return seed
    raise ValueError(f"score_kind must be 'posterior' or 'logit', "
                     f"got {score_kind!r}")


def _backward_pass(net: Network, caches: list, dlogits: np.ndarray,
                   want_taps: bool, want_params: bool):
    """Shared reverse sweep; counts as one gradient call."""
    tap_of_stage = {idx: name for name, idx in net.taps.items()}
    tap_grads: dict[str, np.ndarray] = {}
    param_grads: dict[str, np.ndarray] = {}
    g = dlogits
    for i in range(len(net.stages) - 1, -1, -1):
        if want_taps and i in tap_of_stage:
            tap_grads[tap_of_stage[i]] = g[0].copy()
        name, layer = net.stages[i]
        g, grads = layer.backward(g, caches[i])
        if want_params:
            for k, v in grads.items():
                param_grads[f"{name}/{k}"] = v
    net.grad_calls += 1
    return g, tap_grads, param_grads


def backward_from_class(net: Network, trace: ActivationTrace, class_id: int,
                        score_kind: str = "posterior") -> GradientTrace:
    """Gradient of one class score w.r.t. every tap activation.

    The score is the class posterior by default; ``score_kind='logit'``
    differentiates the pre-softmax logit instead.
    """
    seed = _score_seed(trace.posteriors, class_id, score_kind)
    _, tap_grads, _ = _backward_pass(net, trace.caches, seed[None, :],
                                     want_taps=True, want_params=False)
    ordered = {name: tap_grads[name] for name in net.taps}
    return GradientTrace(taps=ordered, class_id=class_id,
                         score_kind=score_kind)


def training_gradients(net: Network, caches: list, dlogits: np.ndarray):
    """Parameter gradients for a batch given the loss gradient at the logits."""
    _, _, param_grads = _backward_pass(net, caches, dlogits,
                                       want_taps=False, want_params=True)
    return param_grads


def run_forward_batch(net: Network, x: np.ndarray):
    """Batched forward that keeps the caches (training path)."""
    if x.ndim == 3:
        x = x[:, :, :, None]
    _check_input(net, x)
    return _run_stages(net, x)


def forward_from_tap(net: Network, tap: str, activation: np.ndarray):
    """Run only the stages downstream of ``tap`` on a given activation."""
    idx = net.tap_stage(tap)
    act = np.asarray(activation, dtype=np.float64)
    y, _ = _run_stages(net, act[None, ...], start=idx + 1)
    return y[0], softmax(y[0])


def finite_diff_grad(net: Network, features: np.ndarray, class_id: int,
                     tap: str, location: tuple[int, int, int],
                     epsilon: float = 1e-5,
                     score_kind: str = "posterior") -> float:
    """Central-difference estimate of d(score)/d(tap activation) at one cell.

    Perturbs the captured tap activation and re-runs only the downstream
    subgraph, so it is an oracle independent of the analytic backward pass.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    trace = forward(net, features)
    if tap not in trace.taps:
        net.tap_stage(tap)  # raises with the registered-tap list
    base = trace.taps[tap]
    try:
        base[location]
    except IndexError:
        raise ValueError(
            f"location {location} outside tap {tap!r} shape {base.shape}"
        ) from None

    def score_at(delta: float) -> float:
        act = base.copy()
        act[location] += delta
        logits, posts = forward_from_tap(net, tap, act)
        return float(logits[class_id] if score_kind == "logit"
                     else posts[class_id])

    if not 0 <= class_id < trace.logits.shape[0]:
        raise ValueError(f"class id {class_id} out of range")
    return (score_at(epsilon) - score_at(-epsilon)) / (2.0 * epsilon)

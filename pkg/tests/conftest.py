import numpy as np
import pytest

from nnattrib import zoo
from nnattrib.forward import forward

KINK_MARGIN = 1e-3


@pytest.fixture(scope="session")
def models():
    return zoo.zoo(bias=True)


@pytest.fixture(scope="session")
def bias_free():
    return zoo.zoo(bias=False)


def logit(m, x, unit):
    return forward(m, x)[0][unit]


def finite_difference(m, x, unit, h=1e-5):
    """Central differences of one logit with respect to every input element."""
    g = np.zeros(x.size)
    flat = x.ravel()
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        g[i] = (logit(m, up.reshape(x.shape), unit) - logit(m, down.reshape(x.shape), unit)) / (2 * h)
    return g.reshape(x.shape)


def is_kink_free(m, x, margin=KINK_MARGIN):
    """No pre-ReLU value and no max-pool runner-up within ``margin`` of a switch."""
    _, tape = forward(m, x)
    for i, layer in enumerate(m.layers):
        entry = tape[i]
        if layer.kind == "relu" and np.min(np.abs(entry.input)) < margin:
            return False
        if layer.kind == "maxpool2d":
            from nnattrib.forward import windows

            w = windows(entry.input, layer.window_h, layer.window_w, layer.stride)
            flat = np.sort(w.reshape(*w.shape[:3], -1), axis=-1)
            top, second = flat[..., -1], flat[..., -2]
            if np.any((top > 0) & (top - second < margin)):
                return False
    return True


def kink_free_inputs(m, count, seed=0, low=None, high=None):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        if low is None:
            x = rng.standard_normal(m.input_shape)
        else:
            x = rng.uniform(low, high, m.input_shape)
        if is_kink_free(m, x):
            out.append(x)
    return out


def naive_conv(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation; 'same' pads the odd cell bottom/right."""
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    if padding == "same":
        oh, ow = -(-h // stride), -(-wd // stride)
        th = max((oh - 1) * stride + kh - h, 0)
        tw = max((ow - 1) * stride + kw - wd, 0)
        top, left = th // 2, tw // 2
    else:
        oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
        top = left = 0
    y = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for r in range(oh):
            for c in range(ow):
                s = 0.0 if b is None else b[o]
                for ci in range(c_in):
                    for dy in range(kh):
                        for dx in range(kw):
                            yy, xx = r * stride + dy - top, c * stride + dx - left
                            if 0 <= yy < h and 0 <= xx < wd:
                                s += x[ci, yy, xx] * w[o, ci, dy, dx]
                y[o, r, c] = s
    return y

"""
Differentiable Numeric Kernels
Forward functions return ``(output, cache)``; the matching ``*_backward``
consumes the upstream gradient and the cache.

Conventions:
    dense:      x (N, a), weight (b, a), bias (b,)
    conv:       x (N, C_in, *spatial), weight (C_out, C_in, *kernel)
    recurrent:  x (N, T, a), hidden (N, T, h)
"""

from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, softmax

IntOrTuple = Union[int, Sequence[int]]

GRU_PARAM_NAMES = ("w_z", "w_r", "w_n", "u_z", "u_r", "u_n", "b_z", "b_r", "b_n")


def _check_finite(name: str, value: np.ndarray):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"Nonfinite values produced by {name}")


def _as_tuple(value: IntOrTuple, rank: int, what: str) -> Tuple[int, ...]:
    if np.isscalar(value):
        values = (int(value),) * rank
    else:
        values = tuple(int(v) for v in value)
    if len(values) != rank:
        raise ValueError(f"{what} must have {rank} entries, got {len(values)}")
    return values


# Dense

def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """y = x W^T + bias."""
    if weight.ndim != 2:
        raise ValueError(f"linear weight must be 2-D (b x a), got shape {weight.shape}")
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear input must have shape (N, {weight.shape[1]}), got {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
    y = x @ weight.T + bias
    _check_finite("linear", y)
    return y, (x, weight)


def linear_backward(dy: np.ndarray, cache):
    x, weight = cache
    dx = dy @ weight
    dweight = dy.T @ x
    dbias = dy.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    return dx, dweight, dbias


# Pointwise

def relu(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def l2_normalize(x: np.ndarray, eps: float = 1e-12):
    """Row-wise x / sqrt(|x|^2 + eps)."""
    norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True) + eps)
    y = x / norm
    return y, (y, norm)


def l2_normalize_backward(dy: np.ndarray, cache) -> np.ndarray:
    y, norm = cache
    return (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / norm


# Convolution (cross-correlation) over any number of spatial dimensions

def conv_nd(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
            stride: IntOrTuple = 1, padding: IntOrTuple = 0):
    """N-dimensional cross-correlation with zero padding.

    The kernel is applied one offset at a time: each offset contributes a
    strided slice of the padded input contracted against one kernel tap.
    """
    rank = weight.ndim - 2
    if rank < 1:
        raise ValueError(f"conv weight must have rank >= 3, got shape {weight.shape}")
    stride = _as_tuple(stride, rank, "stride")
    padding = _as_tuple(padding, rank, "padding")
    if any(s <= 0 for s in stride):
        raise ValueError(f"stride must be positive, got {stride}")
    if any(p < 0 for p in padding):
        raise ValueError(f"padding must be non-negative, got {padding}")
    if x.ndim != rank + 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv input must have shape (N, {weight.shape[1]}, <{rank} spatial dims>), "
                         f"got {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"conv bias must have shape ({weight.shape[0]},), got {bias.shape}")

    kernel = weight.shape[2:]
    padded = tuple(n + 2 * p for n, p in zip(x.shape[2:], padding))
    if any(k > n for k, n in zip(kernel, padded)):
        raise ValueError(f"kernel {kernel} larger than padded input {padded}")

    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    out_shape = tuple((n - k) // s + 1 for n, k, s in zip(padded, kernel, stride))

    y = np.zeros((x.shape[0], weight.shape[0]) + out_shape, dtype=np.result_type(x, weight))
    for offset in np.ndindex(*kernel):
        patch = xp[_window(offset, stride, out_shape)]
        tap = weight[(slice(None), slice(None)) + offset]
        y += np.moveaxis(np.tensordot(patch, tap, axes=([1], [1])), -1, 1)
    y += bias.reshape((1, -1) + (1,) * rank)
    _check_finite("conv", y)

    return y, (x.shape, xp, weight, stride, padding, out_shape)


def _window(offset, stride, out_shape):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_shape)
    )


def conv_nd_backward(dy: np.ndarray, cache):
    x_shape, xp, weight, stride, padding, out_shape = cache
    rank = len(out_shape)
    spatial_axes = tuple(range(2, 2 + rank))

    dxp = np.zeros_like(xp, dtype=np.result_type(xp, dy))
    dweight = np.zeros_like(weight, dtype=np.result_type(weight, dy))
    dbias = dy.sum(axis=(0,) + spatial_axes, dtype=np.float64).astype(dweight.dtype)

    contract = [0] + list(spatial_axes)
    for offset in np.ndindex(*weight.shape[2:]):
        window = _window(offset, stride, out_shape)
        tap_index = (slice(None), slice(None)) + offset
        dweight[tap_index] = np.tensordot(dy, xp[window], axes=(contract, contract))
        dxp[window] += np.moveaxis(np.tensordot(dy, weight[tap_index], axes=([1], [0])), -1, 1)

    unpad = (slice(None), slice(None)) + tuple(
        slice(p, p + n) for p, n in zip(padding, x_shape[2:])
    )
    return dxp[unpad], dweight, dbias


def conv1d(x, weight, bias, stride=1, padding=0):
    if weight.ndim != 3:
        raise ValueError(f"conv1d weight must be (C_out, C_in, k), got {weight.shape}")
    return conv_nd(x, weight, bias, stride, padding)


def conv2d(x, weight, bias, stride=1, padding=0):
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be (C_out, C_in, kh, kw), got {weight.shape}")
    return conv_nd(x, weight, bias, stride, padding)


def conv3d(x, weight, bias, stride=1, padding=0):
    if weight.ndim != 5:
        raise ValueError(f"conv3d weight must be (C_out, C_in, kt, kh, kw), got {weight.shape}")
    return conv_nd(x, weight, bias, stride, padding)


def global_average_pool(x: np.ndarray):
    """Mean over all spatial axes: (N, C, *spatial) -> (N, C)."""
    axes = tuple(range(2, x.ndim))
    y = x.mean(axis=axes, dtype=np.float64).astype(x.dtype)
    return y, x.shape


def global_average_pool_backward(dy: np.ndarray, shape) -> np.ndarray:
    count = int(np.prod(shape[2:]))
    expanded = dy.reshape(dy.shape + (1,) * (len(shape) - 2)) / count
    return np.broadcast_to(expanded, shape).copy()


# Recurrent

def gru_sequence(x: np.ndarray, params: Mapping[str, np.ndarray],
                 h0: Optional[np.ndarray] = None):
    """Run a GRU over the time axis.

    z = sig(x Wz' + h Uz' + bz), r = sig(x Wr' + h Ur' + br),
    n = tanh(x Wn' + (r*h) Un' + bn), h' = (1 - z) * h + z * n

    Returns:
        Tuple of (hidden states (N, T, h), final state (N, h), cache)
    """
    if x.ndim != 3:
        raise ValueError(f"gru input must be (N, T, a), got shape {x.shape}")
    n_batch, steps, n_in = x.shape
    if steps == 0:
        raise ValueError("gru_sequence requires T >= 1")
    hidden = params["u_z"].shape[0]
    for name in ("w_z", "w_r", "w_n"):
        if params[name].shape != (hidden, n_in):
            raise ValueError(f"gru '{name}' must have shape ({hidden}, {n_in}), got {params[name].shape}")
    for name in ("u_z", "u_r", "u_n"):
        if params[name].shape != (hidden, hidden):
            raise ValueError(f"gru '{name}' must have shape ({hidden}, {hidden}), got {params[name].shape}")
    for name in ("b_z", "b_r", "b_n"):
        if params[name].shape != (hidden,):
            raise ValueError(f"gru '{name}' must have shape ({hidden},), got {params[name].shape}")

    dtype = np.result_type(x, params["w_z"])
    h = np.zeros((n_batch, hidden), dtype=dtype) if h0 is None else h0
    states = np.empty((n_batch, steps, hidden), dtype=dtype)
    steps_cache = []

    for t in range(steps):
        x_t = x[:, t, :]
        z = expit(x_t @ params["w_z"].T + h @ params["u_z"].T + params["b_z"])
        r = expit(x_t @ params["w_r"].T + h @ params["u_r"].T + params["b_r"])
        rh = r * h
        n = np.tanh(x_t @ params["w_n"].T + rh @ params["u_n"].T + params["b_n"])
        h_next = (1 - z) * h + z * n
        steps_cache.append((h, z, r, rh, n))
        states[:, t, :] = h_next
        h = h_next

    _check_finite("gru_sequence", states)
    return states, h, (x, dict(params), steps_cache)


def gru_sequence_backward(dstates: Optional[np.ndarray], dfinal: Optional[np.ndarray], cache):
    """Backpropagation through time.

    Args:
        dstates: Gradient w.r.t. every hidden state (N, T, h), or None
        dfinal: Gradient w.r.t. the final state (N, h), or None
        cache: Cache from gru_sequence

    Returns:
        Tuple of (dx, dict of parameter gradients)
    """
    x, params, steps_cache = cache
    n_batch, steps, _ = x.shape
    hidden = params["u_z"].shape[0]

    grads: Dict[str, np.ndarray] = {name: np.zeros_like(params[name]) for name in GRU_PARAM_NAMES}
    dx = np.zeros_like(x, dtype=np.result_type(x, params["w_z"]))
    dh = np.zeros((n_batch, hidden), dtype=dx.dtype)
    if dfinal is not None:
        dh = dh + dfinal

    for t in reversed(range(steps)):
        if dstates is not None:
            dh = dh + dstates[:, t, :]
        h_prev, z, r, rh, n = steps_cache[t]
        x_t = x[:, t, :]

        dn = dh * z
        dz = dh * (n - h_prev)
        dh_prev = dh * (1 - z)

        da_n = dn * (1 - n * n)
        grads["w_n"] += da_n.T @ x_t
        grads["u_n"] += da_n.T @ rh
        grads["b_n"] += da_n.sum(axis=0)
        drh = da_n @ params["u_n"]
        dr = drh * h_prev
        dh_prev += drh * r

        da_z = dz * z * (1 - z)
        da_r = dr * r * (1 - r)
        grads["w_z"] += da_z.T @ x_t
        grads["u_z"] += da_z.T @ h_prev
        grads["b_z"] += da_z.sum(axis=0)
        grads["w_r"] += da_r.T @ x_t
        grads["u_r"] += da_r.T @ h_prev
        grads["b_r"] += da_r.sum(axis=0)

        dx[:, t, :] = da_n @ params["w_n"] + da_z @ params["w_z"] + da_r @ params["w_r"]
        dh_prev += da_z @ params["u_z"] + da_r @ params["u_r"]
        dh = dh_prev

    return dx, grads


# Attention pooling

def attention_pool(h: np.ndarray, w: np.ndarray):
    """alpha = softmax_t(h_t . w); output = sum_t alpha_t h_t."""
    if h.ndim != 3:
        raise ValueError(f"attention_pool input must be (N, T, d), got shape {h.shape}")
    if h.shape[1] == 0:
        raise ValueError("attention_pool requires T >= 1")
    if w.shape != (h.shape[2],):
        raise ValueError(f"attention_pool weight must have shape ({h.shape[2]},), got {w.shape}")
    scores = h @ w
    alpha = softmax(scores, axis=1)
    out = np.einsum("nt,ntd->nd", alpha, h)
    _check_finite("attention_pool", out)
    return out, (h, w, alpha)


def attention_pool_backward(dout: np.ndarray, cache):
    h, w, alpha = cache
    dalpha = np.einsum("nd,ntd->nt", dout, h)
    dscores = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    dh = alpha[:, :, None] * dout[:, None, :] + dscores[:, :, None] * w[None, None, :]
    dw = np.einsum("nt,ntd->d", dscores, h)
    return dh, dw

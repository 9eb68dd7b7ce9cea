"""Forward/backward machinery for one trainable block: a convolutional (or
dense) main transform with activation and pooling, plus a lightweight
auxiliary projection that maps the block output to a low-dimensional
matrix on which the structural loss is computed.

Gradients are fully manual reverse-mode and never leave the block: the
input gradient is not produced, and the detached skip path contributes no
gradient at all.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import DEFAULT_EPS, NumericsError, row_normalize
from .losses import LossBundle

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid", "binary_step")
LEAKY_SLOPE = 0.01


class MemoryConstraintError(RuntimeError):
    """Orthogonality loss on full-width features is refused: without the
    auxiliary projection the M' x M' product does not fit the budget."""


# ---------------------------------------------------------------------------
# elementwise activations


def activation(kind: str, x: np.ndarray):
    """Elementwise activation; returns (value, derivative at x).

    binary_step forwards a hard threshold and uses a straight-through
    derivative of 1 on |x| <= 1.
    """
    if kind == "relu":
        return np.maximum(x, 0.0), (x > 0).astype(x.dtype)
    if kind == "leaky_relu":
        d = np.where(x > 0, 1.0, LEAKY_SLOPE).astype(x.dtype)
        return np.where(x > 0, x, LEAKY_SLOPE * x), d
    if kind == "tanh":
        y = np.tanh(x)
        return y, 1.0 - y * y
    if kind == "sigmoid":
        y = 1.0 / (1.0 + np.exp(-x))
        return y, y * (1.0 - y)
    if kind == "binary_step":
        return (x > 0).astype(x.dtype), (np.abs(x) <= 1.0).astype(x.dtype)
    raise NumericsError(f"unknown activation kind: {kind!r}")


# ---------------------------------------------------------------------------
# convolution via im2col


def _out_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    oh, ow = _out_hw(h, w, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    oh, ow = _out_hw(h, w, kh, kw, stride, pad)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad == 0:
        return xp
    return xp[:, :, pad:-pad, pad:-pad]


def conv_forward(x, kernel, bias, stride: int = 1, padding: int = 1):
    """Cross-correlation of x (B,C,H,W) with kernel (O,C,kh,kw).

    Returns (out, cache) where cache feeds conv_backward.
    """
    b, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise NumericsError(f"channel mismatch: input {c}, kernel {ck}")
    oh, ow = _out_hw(h, w, kh, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = cols @ kernel.reshape(o, -1).T + bias
    out = out.reshape(b, oh, ow, o).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, kernel, stride, padding)
    return out, cache


def conv_backward(grad_out, cache, need_dx: bool = True):
    """Gradients of a conv_forward call; returns (dkernel, dbias, dx)."""
    x_shape, cols, kernel, stride, pad = cache
    o, c, kh, kw = kernel.shape
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    dkernel = (g.T @ cols).reshape(kernel.shape)
    dbias = g.sum(axis=0)
    dx = None
    if need_dx:
        dcols = g @ kernel.reshape(o, -1)
        dx = col2im(dcols, x_shape, kh, kw, stride, pad)
    return dkernel, dbias, dx


# ---------------------------------------------------------------------------
# pooling


def maxpool2x2_forward(x):
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise NumericsError("maxpool2x2 needs even spatial dims")
    r = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2x2_backward(grad_out, cache):
    x_shape, idx = cache
    b, c, h, w = x_shape
    flat = np.zeros((b, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(flat, idx[..., None], grad_out[..., None], axis=-1)
    return flat.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def avgpool2x2(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def global_avgpool_forward(x):
    b, c, h, w = x.shape
    return x.mean(axis=(2, 3)), x.shape


def global_avgpool_backward(grad_out, x_shape):
    b, c, h, w = x_shape
    return np.broadcast_to(grad_out[:, :, None, None], x_shape) / (h * w)


def flatten(x):
    """FeatureMap (B,C,H,W) -> Matrix (B, C*H*W)."""
    return x.reshape(x.shape[0], -1)


def unflatten(m, shape):
    return m.reshape(shape)


# ---------------------------------------------------------------------------
# blocks


@dataclass
class MainBlock:
    """Conv 3x3 -> activation -> maxpool 2x2, with an optional detached
    avg-pool skip connection (channel mismatch handled by zero-padding)."""

    kernel: np.ndarray
    bias: np.ndarray
    activation: str = "leaky_relu"
    use_skip: bool = False

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}


@dataclass
class AuxBlock:
    """Projection head: (1x1 conv, halving channels) x depth -> global
    average pool -> fully-connected to d_proj dimensions."""

    conv_kernels: list
    conv_biases: list
    fc_w: np.ndarray
    fc_b: np.ndarray
    activation: str = "leaky_relu"

    @property
    def d_proj(self):
        return self.fc_w.shape[1]

    def params(self):
        p = {}
        for i, (k, b) in enumerate(zip(self.conv_kernels, self.conv_biases)):
            p[f"conv{i}_kernel"] = k
            p[f"conv{i}_bias"] = b
        p["fc_w"] = self.fc_w
        p["fc_b"] = self.fc_b
        return p


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_main_block(in_ch, out_ch, rng, activation="leaky_relu", use_skip=False, dtype=np.float64):
    fan_in = in_ch * 9
    return MainBlock(
        kernel=_kaiming_uniform(rng, (out_ch, in_ch, 3, 3), fan_in, dtype),
        bias=_kaiming_uniform(rng, (out_ch,), fan_in, dtype),
        activation=activation,
        use_skip=use_skip,
    )


def init_aux_block(in_ch, d_proj=256, depth=1, rng=None, activation="leaky_relu", dtype=np.float64):
    """Build the projection head; each 1x1 conv halves the channel count."""
    kernels, biases = [], []
    ch = in_ch
    for _ in range(depth):
        nxt = max(ch // 2, 1)
        kernels.append(_kaiming_uniform(rng, (nxt, ch, 1, 1), ch, dtype))
        biases.append(_kaiming_uniform(rng, (nxt,), ch, dtype))
        ch = nxt
    return AuxBlock(
        conv_kernels=kernels,
        conv_biases=biases,
        fc_w=_kaiming_uniform(rng, (ch, d_proj), ch, dtype),
        fc_b=_kaiming_uniform(rng, (d_proj,), ch, dtype),
        activation=activation,
    )


def _main_forward(f: MainBlock, x):
    c_out, conv_cache = conv_forward(x, f.kernel, f.bias, stride=1, padding=1)
    a, d_act = activation(f.activation, c_out)
    p, pool_cache = maxpool2x2_forward(a)
    out = p
    if f.use_skip:
        skip = avgpool2x2(x)
        sc, oc = skip.shape[1], p.shape[1]
        if sc < oc:
            skip = np.pad(skip, ((0, 0), (0, oc - sc), (0, 0), (0, 0)))
        elif sc > oc:
            skip = skip[:, :oc]
        out = p + skip  # detached: no gradient flows back through skip
    return out, (conv_cache, d_act, pool_cache)


def _aux_forward(phi: AuxBlock, yp):
    h = yp
    conv_caches = []
    for k, b in zip(phi.conv_kernels, phi.conv_biases):
        c_out, cache = conv_forward(h, k, b, stride=1, padding=0)
        a, d_act = activation(phi.activation, c_out)
        conv_caches.append((cache, d_act))
        h = a
    g, gap_shape = global_avgpool_forward(h)
    z = g @ phi.fc_w + phi.fc_b
    return z, (conv_caches, gap_shape, g)


def block_forward(f: MainBlock, phi, x):
    """Forward one block: returns (Yp, Z).

    With phi=None the block has no projection head and Z is the flattened
    main output itself.
    """
    yp, _ = _main_forward(f, x)
    if phi is None:
        return yp, flatten(yp)
    z, _ = _aux_forward(phi, yp)
    return yp, z


def _structural_grads(z, x_flat, lam, eps, use_sphere=True, use_oja=False):
    """Loss bundle and dL/dZ for the normalized structural objective.

    With use_oja the inverse-weighted trace form of the matching loss is
    used in place of (or alongside) the plain Frobenius form; its sphere
    slot in the bundle then reports the combined matching term.
    """
    zn = np.linalg.norm(z, axis=1, keepdims=True)
    z_hat = z / np.maximum(zn, eps)
    x_hat = row_normalize(x_flat, eps)
    kx = x_hat @ x_hat.T
    kd = z_hat @ z_hat.T - kx
    m = z.shape[1]
    zz = z_hat.T @ z_hat - np.eye(m, dtype=z.dtype)
    orth = float(np.sum(zz * zz))
    match = 0.0
    g_hat = np.zeros_like(z_hat)
    if use_sphere:
        match += float(np.sum(kd * kd))
        g_hat = g_hat + 4.0 * kd @ z_hat
    if use_oja:
        # ridge keeps the inverse usable on near-singular batch Grams
        a = np.linalg.inv(kx + 1e-6 * np.trace(kx) / kx.shape[0] * np.eye(kx.shape[0], dtype=kx.dtype))
        ad = a @ kd
        match += 0.25 * float(np.trace(ad @ kd))
        g_hat = g_hat + 0.5 * (ad + ad.T) @ z_hat
    sphere = match
    if lam != 0.0:
        g_hat = g_hat + lam * 4.0 * (z_hat @ zz)
    # through row normalization
    big = zn[:, 0] >= eps
    dot = np.sum(g_hat * z_hat, axis=1, keepdims=True)
    dz = np.where(big[:, None], (g_hat - dot * z_hat) / np.maximum(zn, eps), g_hat / eps)
    return LossBundle(sphere=sphere, orth=orth, total=sphere + lam * orth, lam=lam), dz


def block_backward(f: MainBlock, phi, x, lam: float, eps: float = DEFAULT_EPS,
                   orth_width_cap: int = 4096, use_sphere: bool = True,
                   use_oja: bool = False):
    """Compute the block-local loss on (Z, flattened input) and reverse-mode
    gradients for every parameter of f and phi.

    Returns (grads, bundle) where grads maps "main.<name>" / "aux.<name>"
    to arrays shaped like the parameters.  No input gradient is produced.
    """
    if x.shape[0] < 2:
        raise NumericsError("structural loss needs a batch of at least 2")
    yp, (conv_cache, d_act, pool_cache) = _main_forward(f, x)
    if phi is None:
        z = flatten(yp)
        if lam != 0.0 and z.shape[1] > orth_width_cap:
            raise MemoryConstraintError(
                f"orthogonality loss on full-width features ({z.shape[1]} dims) "
                "requires the auxiliary projection; memory constraint"
            )
        aux_cache = None
    else:
        z, aux_cache = _aux_forward(phi, yp)

    bundle, dz = _structural_grads(z, flatten(x), lam, eps,
                                   use_sphere=use_sphere, use_oja=use_oja)
    grads = {}

    if phi is None:
        d_yp = unflatten(dz, yp.shape)
    else:
        conv_caches, gap_shape, g = aux_cache
        grads["aux.fc_w"] = g.T @ dz
        grads["aux.fc_b"] = dz.sum(axis=0)
        dg = dz @ phi.fc_w.T
        dh = global_avgpool_backward(dg, gap_shape)
        for i in range(len(conv_caches) - 1, -1, -1):
            cache, da = conv_caches[i]
            dk, db, dh = conv_backward(dh * da, cache, need_dx=True)
            grads[f"aux.conv{i}_kernel"] = dk
            grads[f"aux.conv{i}_bias"] = db
        d_yp = dh

    # skip path (if any) is detached: d_yp passes to the pooled main path only
    da = maxpool2x2_backward(d_yp, pool_cache)
    dk, db, _ = conv_backward(da * d_act, conv_cache, need_dx=False)
    grads["main.kernel"] = dk
    grads["main.bias"] = db
    return grads, bundle


def block_params(f: MainBlock, phi) -> dict:
    """Flat "main.<name>" / "aux.<name>" view of a block's parameters."""
    p = {f"main.{k}": v for k, v in f.params().items()}
    if phi is not None:
        p.update({f"aux.{k}": v for k, v in phi.params().items()})
    return p

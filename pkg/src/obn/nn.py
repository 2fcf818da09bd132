"""Layers with explicit forward/backward passes and an activation tape.

Every leaf layer pushes the values it needs for backward onto a
:class:`Tape` during ``forward`` and pops them in ``backward``. Composite
modules call their children's ``backward`` in reverse order, so the tape is
consumed strictly last-in first-out and is empty after a full backward pass.
A layer object used several times (a shared basis, a shared batch norm)
simply owns several tape entries.
"""
import numpy as np

from .errors import DimensionError, TapeError
from .tensor import ConvGeometry, col2im, im2col

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Parameter:
    """A trainable array with a same-shaped gradient buffer."""

    __slots__ = ("data", "grad", "decay")

    def __init__(self, data, decay=True):
        self.data = data
        self.grad = np.zeros_like(data)
        self.decay = decay

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """LIFO record of per-layer forward values."""

    def __init__(self):
        self._entries = []

    def push(self, owner, value):
        self._entries.append((owner, value))

    def pop(self, owner):
        if not self._entries:
            raise TapeError(f"tape is empty, {type(owner).__name__} has nothing to consume")
        who, value = self._entries.pop()
        if who is not owner:
            raise TapeError(f"tape entry belongs to {type(who).__name__}, not {type(owner).__name__}")
        return value

    def __len__(self):
        return len(self._entries)

    def clear(self):
        self._entries.clear()


class Module:
    """Minimal container: registers parameters, buffers, and sub-modules on assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        for reg in (self._params, self._modules, self._buffers):
            reg.pop(name, None)
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def children(self):
        return list(self._modules.values())

    def named_parameters(self, prefix=""):
        """Unique parameters in first-seen order; aliased ones keep their first name."""
        seen = set()
        out = []
        for name, p in self._walk("_params", prefix):
            if id(p) not in seen:
                seen.add(id(p))
                out.append((name, p))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        seen = set()
        out = []
        for (name, owner, key) in self._walk_buffers(prefix):
            if (id(owner), key) not in seen:
                seen.add((id(owner), key))
                out.append((name, owner, key))
        return out

    def _walk(self, attr, prefix):
        for name, item in getattr(self, attr).items():
            yield prefix + name, item
        for name, mod in self._modules.items():
            yield from mod._walk(attr, f"{prefix}{name}.")

    def _walk_buffers(self, prefix):
        for name in self._buffers:
            yield prefix + name, self, name
        for name, mod in self._modules.items():
            yield from mod._walk_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def train(self, mode=True):
        for mod in self.modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x, tape=None):
        raise NotImplementedError

    def backward(self, grad, tape):
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x, tape=None):
        for layer in self.layers:
            x = layer.forward(x, tape)
        return x

    def backward(self, grad, tape):
        for layer in reversed(self.layers):
            grad = layer.backward(grad, tape)
        return grad


# --- convolution --------------------------------------------------------------


def _trim_geometry(x, k, stride, pad):
    """Explicitly pad ``x`` when the output extent would not be integral.

    Floor semantics drop the trailing rows/columns that no window reaches;
    dropping them before unfolding keeps im2col's geometry exact.
    """
    h, w = x.shape[2:]
    eh = (h + 2 * pad - k) % stride
    ew = (w + 2 * pad - k) % stride
    if not (eh or ew):
        return x, pad, None
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = xp.shape[2] - eh, xp.shape[3] - ew
    return np.ascontiguousarray(xp[:, :, :hp, :wp]), 0, (pad, h, w, eh, ew)


def conv2d_forward(x, weight, stride=1, pad=0):
    """Cross-correlation of ``N x S x H x W`` input with ``T x S x k x k`` filters.

    Returns ``(output, cache)``; the cache feeds :func:`conv2d_backward`.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    t, s, k, k2 = weight.shape
    if k != k2:
        raise DimensionError(f"square kernels only, got {k}x{k2}")
    if x.shape[1] != s:
        raise DimensionError(f"input has {x.shape[1]} channels, weight expects {s}")
    n = x.shape[0]
    xt, p, trim = _trim_geometry(x, k, stride, pad)
    geom = ConvGeometry.of(xt, k, stride, p)
    cols = im2col(xt, k, stride, p)
    out = weight.reshape(t, -1) @ cols
    out = out.reshape(t, n, geom.out_h, geom.out_w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), (cols, geom, trim, weight)


def conv2d_backward(cache, grad_out, need_input=True):
    cols, geom, trim, weight = cache
    t = weight.shape[0]
    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(t, -1)
    if g.shape[1] != cols.shape[1]:
        raise TapeError(f"grad_out {grad_out.shape} does not match the recorded forward")
    grad_w = (g @ cols.T).reshape(weight.shape)
    if not need_input:
        return None, grad_w
    grad_x = col2im(weight.reshape(t, -1).T @ g, geom)
    if trim is not None:
        pad, h, w, eh, ew = trim
        full = np.zeros(grad_x.shape[:2] + (h + 2 * pad, w + 2 * pad), dtype=grad_x.dtype)
        full[:, :, : full.shape[2] - eh, : full.shape[3] - ew] = grad_x
        grad_x = np.ascontiguousarray(full[:, :, pad : pad + h, pad : pad + w])
    return grad_x, grad_w


def kaiming_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    """Bias-free 2-d convolution. Pass ``weight`` to tie it to another layer."""

    def __init__(self, in_ch, out_ch, k, stride=1, pad=None, rng=None, dtype=np.float32, weight=None):
        super().__init__()
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        if weight is None:
            rng = rng or np.random.default_rng(0)
            weight = Parameter(kaiming_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype))
        elif weight.shape != (out_ch, in_ch, k, k):
            raise DimensionError(f"tied weight {weight.shape} != {(out_ch, in_ch, k, k)}")
        self.weight = weight

    def forward(self, x, tape=None):
        y, cache = conv2d_forward(x, self.weight.data, self.stride, self.pad)
        if tape is not None:
            tape.push(self, cache)
        return y

    def backward(self, grad, tape):
        gx, gw = conv2d_backward(tape.pop(self), grad)
        self.weight.grad += gw
        return gx


# --- pointwise layers ---------------------------------------------------------


class ReLU(Module):
    def forward(self, x, tape=None):
        mask = x > 0
        if tape is not None:
            tape.push(self, mask)
        return x * mask

    def backward(self, grad, tape):
        return grad * tape.pop(self)


class BatchNorm2d(Module):
    """Per-channel batch normalization with learnable scale and shift.

    Train mode normalizes with batch statistics and updates running
    estimates (unbiased variance, momentum 0.1); eval mode uses the running
    estimates, which start at mean 0 / variance 1.
    """

    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(np.ones(channels, dtype=dtype), decay=False)
        self.bias = Parameter(np.zeros(channels, dtype=dtype), decay=False)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x, tape=None):
        if x.ndim != 4 or x.shape[1] != self.weight.shape[0]:
            raise DimensionError(f"batchnorm over {self.weight.shape[0]} channels got {x.shape}")
        g = self.weight.data[None, :, None, None]
        b = self.bias.data[None, :, None, None]
        if not self.training:
            inv = 1.0 / np.sqrt(self.running_var + BN_EPS)
            xhat = (x - self.running_mean[None, :, None, None]) * inv[None, :, None, None]
            if tape is not None:
                tape.push(self, (xhat, inv, False))
            return xhat * g + b
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = np.mean(xc * xc, axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv[None, :, None, None]
        mom = BN_MOMENTUM
        unbiased = var * (m / max(m - 1, 1))
        self.running_mean[...] = (1 - mom) * self.running_mean + mom * mean
        self.running_var[...] = (1 - mom) * self.running_var + mom * unbiased
        if tape is not None:
            tape.push(self, (xhat, inv, True))
        return xhat * g + b

    def backward(self, grad, tape):
        xhat, inv, batch_stats = tape.pop(self)
        self.weight.grad += np.sum(grad * xhat, axis=(0, 2, 3))
        self.bias.grad += np.sum(grad, axis=(0, 2, 3))
        gxhat = grad * self.weight.data[None, :, None, None]
        if not batch_stats:
            return gxhat * inv[None, :, None, None]
        mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = np.mean(gxhat * xhat, axis=(0, 2, 3), keepdims=True)
        return (gxhat - mean_g - xhat * mean_gx) * inv[None, :, None, None]


class GlobalAvgPool(Module):
    """Average over the spatial extent: ``N x C x H x W -> N x C``."""

    def forward(self, x, tape=None):
        if tape is not None:
            tape.push(self, x.shape)
        return x.mean(axis=(2, 3))

    def backward(self, grad, tape):
        shape = tape.pop(self)
        scale = 1.0 / (shape[2] * shape[3])
        return np.broadcast_to((grad * scale)[:, :, None, None], shape).copy()


class MaxPool2d(Module):
    """Max pooling with -inf padding and floor output extents (ImageNet stem)."""

    def __init__(self, k=3, stride=2, pad=1):
        super().__init__()
        self.k, self.stride, self.pad = k, stride, pad

    def forward(self, x, tape=None):
        n, c, h, w = x.shape
        p, s = self.pad, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
        eh, ew = (h + 2 * p - self.k) % s, (w + 2 * p - self.k) % s
        xp = np.ascontiguousarray(xp[:, :, : xp.shape[2] - eh, : xp.shape[3] - ew])
        flat = xp.reshape(n * c, 1, *xp.shape[2:])
        geom = ConvGeometry.of(flat, self.k, s, 0)
        cols = im2col(flat, self.k, s, 0)
        arg = cols.argmax(axis=0)
        out = cols[arg, np.arange(cols.shape[1])].reshape(n, c, geom.out_h, geom.out_w)
        if tape is not None:
            tape.push(self, (arg, geom, x.shape))
        return out

    def backward(self, grad, tape):
        arg, geom, shape = tape.pop(self)
        p = self.pad
        cols = np.zeros(geom.cols_shape, dtype=grad.dtype)
        cols[arg, np.arange(cols.shape[1])] = grad.reshape(-1)
        g = col2im(cols, geom).reshape(shape[0], shape[1], geom.height, geom.width)
        full = np.zeros(shape[:2] + (shape[2] + 2 * p, shape[3] + 2 * p), dtype=grad.dtype)
        full[:, :, : geom.height, : geom.width] = g
        return np.ascontiguousarray(full[:, :, p : p + shape[2], p : p + shape[3]])


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype))
        self.bias = Parameter(rng.uniform(-bound, bound, out_features).astype(dtype))

    def forward(self, x, tape=None):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise DimensionError(f"linear expects N x {self.weight.shape[1]}, got {x.shape}")
        if tape is not None:
            tape.push(self, x)
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad, tape):
        x = tape.pop(self)
        self.weight.grad += grad.T @ x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.data


class ResidualAdd(Module):
    """``a + b``; backward hands the incoming gradient to both branches unchanged."""

    def forward(self, a, b, tape=None):
        if a.shape != b.shape:
            raise DimensionError(f"residual branches differ: {a.shape} vs {b.shape}")
        if tape is not None:
            tape.push(self, None)
        return a + b

    def backward(self, grad, tape):
        tape.pop(self)
        return grad, grad


class PadShortcut(Module):
    """Parameter-free downsampling shortcut: spatial subsampling plus zero channel padding."""

    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride

    def forward(self, x, tape=None):
        sub = x[:, :, :: self.stride, :: self.stride]
        out = np.zeros((x.shape[0], self.out_ch) + sub.shape[2:], dtype=x.dtype)
        lo = (self.out_ch - self.in_ch) // 2
        out[:, lo : lo + self.in_ch] = sub
        if tape is not None:
            tape.push(self, x.shape)
        return out

    def backward(self, grad, tape):
        shape = tape.pop(self)
        lo = (self.out_ch - self.in_ch) // 2
        g = np.zeros(shape, dtype=grad.dtype)
        g[:, :, :: self.stride, :: self.stride] = grad[:, lo : lo + self.in_ch]
        return g


class SoftmaxCrossEntropy(Module):
    """Mean softmax cross-entropy over the batch."""

    def forward(self, logits, labels, tape=None):
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = logits.shape[0]
        loss = -logp[np.arange(n), labels].mean()
        if tape is not None:
            tape.push(self, (logp, labels))
        return loss

    def backward(self, grad, tape):
        logp, labels = tape.pop(self)
        n = logp.shape[0]
        g = np.exp(logp)
        g[np.arange(n), labels] -= 1
        return g * (grad / n)

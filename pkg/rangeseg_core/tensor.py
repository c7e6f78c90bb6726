"""
tensor.py

Minimal reverse-mode autodiff over numpy arrays. A Tensor records the
tensors it was computed from and a closure mapping its output gradient to
gradients for each parent; backward() walks the graph in reverse
topological order and accumulates gradients into the leaves that require
them.

Only the operations the segmentation network needs are provided. All
reductions run in a fixed order, so results are bitwise reproducible for a
given input and dtype.
"""

import numpy as np

from .errors import EmptyInputError, FormatError, ShapeError


class Tensor:
    def __init__(self, data, requires_grad=False):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        """Reverse-mode sweep from a scalar; gradients accumulate into leaves."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar tensor, got shape {self.shape}")
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(_topological_order(self)):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                node.grad = grad if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value, dtype=dtype)
    return Tensor(array)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(value):
    return (value, value) if isinstance(value, int) else tuple(value)


# --- elementwise ---

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def scale(a, factor):
    return _result(a.data * factor, (a,), lambda grad: (grad * factor,))


def leaky_relu(x, slope=0.01):
    positive = x.data > 0
    factor = np.where(positive, 1.0, slope).astype(x.dtype)
    return _result(x.data * factor, (x,), lambda grad: (grad * factor,))


def sigmoid(x):
    data = x.data
    out = np.empty_like(data)
    pos = data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-data[pos]))
    e = np.exp(data[~pos])
    out[~pos] = e / (1.0 + e)
    return _result(out, (x,), lambda grad: (grad * out * (1.0 - out),))


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(grad):
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


# --- shape and reductions ---

def reshape(x, shape):
    original = x.shape
    return _result(x.data.reshape(shape), (x,), lambda grad: (grad.reshape(original),))


def transpose(x, axes):
    inverse = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda grad: (grad.transpose(inverse),))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(grad):
        return tuple(np.take(grad, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, x.shape).copy(),)

    return _result(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / count)


def maxpool_axis(x, axis):
    """Max along `axis`; gradient flows to the argmax slot (ties -> lowest index)."""
    if x.shape[axis] < 1:
        raise ShapeError(f"cannot pool over empty axis {axis} of shape {x.shape}")
    index = np.argmax(x.data, axis=axis)
    expanded = np.expand_dims(index, axis)
    out = np.take_along_axis(x.data, expanded, axis=axis).squeeze(axis)

    def backward(grad):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, expanded, np.expand_dims(grad, axis), axis=axis)
        return (full,)

    return _result(out, (x,), backward), index


def gather_slots(x, index):
    """(B, C, P) gathered by an (P, S) index -> (B, C, P, S); index -1 yields zero."""
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = x.data[:, :, safe] * valid.astype(x.dtype)

    def backward(grad):
        full = np.zeros_like(x.data)
        masked = grad * valid.astype(grad.dtype)
        flat = full.reshape(full.shape[0] * full.shape[1], full.shape[2])
        np.add.at(flat, (slice(None), safe.reshape(-1)),
                  masked.reshape(flat.shape[0], -1))
        return (full,)

    return _result(out, (x,), backward)


def pad_circular_width(x, pad):
    """Wrap the last axis: `pad` columns from each end are copied to the other."""
    if pad == 0:
        return x
    width = x.shape[-1]
    if pad > width:
        raise ShapeError(f"circular pad {pad} exceeds width {width}")
    index = np.concatenate([np.arange(width - pad, width), np.arange(width), np.arange(pad)])
    out = x.data[..., index]

    def backward(grad):
        full = np.zeros_like(x.data)
        np.add.at(full.reshape(-1, width), (slice(None), index), grad.reshape(-1, len(index)))
        return (full,)

    return _result(out, (x,), backward)


# --- convolution and normalization ---

def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """Grouped, dilated, strided 2D cross-correlation on (B, C, H, W)."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weight, got {x.shape} and {weight.shape}")
    batch, cin, height, width = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups or cout % groups or cin_g != cin // groups:
        raise ShapeError(f"conv2d input {x.shape} does not match weight {weight.shape} with groups={groups}")
    hp, wp = height + 2 * ph, width + 2 * pw
    ho = (hp - dh * (kh - 1) - 1) // sh + 1
    wo = (wp - dw * (kw - 1) - 1) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {weight.shape} does not fit padded input {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match weight {weight.shape}")

    g, cout_g = groups, cout // groups
    depthwise = cin_g == 1 and cout_g == 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))).reshape(batch, g, cin_g, hp, wp)
    wg = weight.data.reshape(g, cout_g, cin_g, kh, kw)

    def window(i, j):
        return (slice(None), slice(None), slice(None),
                slice(i * dh, i * dh + sh * (ho - 1) + 1, sh),
                slice(j * dw, j * dw + sw * (wo - 1) + 1, sw))

    out = np.zeros((batch, g, cout_g, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[window(i, j)]
            tap = wg[:, :, :, i, j]
            if depthwise:
                out += patch * tap[None, :, :, :, None]
            else:
                out += np.matmul(tap[None], patch.reshape(batch, g, cin_g, ho * wo)).reshape(out.shape)
    out = out.reshape(batch, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(grad):
        gout = grad.reshape(batch, g, cout_g, ho, wo)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wg)
        for i in range(kh):
            for j in range(kw):
                sl = window(i, j)
                patch = xp[sl]
                tap = wg[:, :, :, i, j]
                if depthwise:
                    gw[:, 0, 0, i, j] = (gout[:, :, 0] * patch[:, :, 0]).sum(axis=(0, 2, 3))
                    gxp[sl] += gout * tap[None, :, :, :, None]
                else:
                    g2 = gout.reshape(batch, g, cout_g, ho * wo)
                    p2 = patch.reshape(batch, g, cin_g, ho * wo)
                    gw[:, :, :, i, j] = np.matmul(g2, p2.transpose(0, 1, 3, 2)).sum(axis=0)
                    gxp[sl] += np.matmul(tap.transpose(0, 2, 1)[None], g2).reshape(patch.shape)
        gx = gxp.reshape(batch, cin, hp, wp)[:, :, ph:ph + height, pw:pw + width]
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5):
    """Per-channel (axis 1) normalization over every other axis.

    Training mode uses batch statistics and updates the running buffers in
    place; eval mode uses the running buffers.
    """
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch norm over {channels} channels got gamma {gamma.shape} and beta {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    count = x.data.size // channels if channels else 0
    if count == 0:
        raise EmptyInputError("batch norm over an empty normalization set")
    view = (1, channels) + (1,) * (x.ndim - 2)

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def backward(grad):
        ggamma = (grad * xhat).sum(axis=axes)
        gbeta = grad.sum(axis=axes)
        gxhat = grad * gamma.data.reshape(view)
        if training:
            gx = (inv_std.reshape(view) / count) * (
                count * gxhat
                - gxhat.sum(axis=axes).reshape(view)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(view))
        else:
            gx = gxhat * inv_std.reshape(view)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


# --- resampling ---

def _interpolation_matrix(size, factor, circular, dtype):
    """(size * factor, size) weights for half-pixel-centred linear interpolation."""
    target = np.arange(size * factor)
    source = (target + 0.5) / factor - 0.5
    if circular:
        low = np.floor(source).astype(np.int64)
        frac = source - low
        high = (low + 1) % size
        low = low % size
    else:
        source = np.maximum(source, 0.0)
        low = np.minimum(np.floor(source).astype(np.int64), size - 1)
        high = np.minimum(low + 1, size - 1)
        frac = source - low
    matrix = np.zeros((size * factor, size), dtype=np.float64)
    np.add.at(matrix, (target, low), 1.0 - frac)
    np.add.at(matrix, (target, high), frac)
    return matrix.astype(dtype)


def bilinear_upsample(x, factor=2, circular=False):
    """(B, C, H, W) -> (B, C, fH, fW); borders clamp, or wrap horizontally if circular."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"bilinear upsample needs non-empty (B, C, H, W), got {x.shape}")
    rows = _interpolation_matrix(x.shape[2], factor, False, x.dtype)
    cols = _interpolation_matrix(x.shape[3], factor, circular, x.dtype)
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return _result(out, (x,), lambda grad: (np.matmul(np.matmul(rows.T, grad), cols),))


# --- loss ---

def weighted_cross_entropy(logits, targets, weights, ignore_id):
    """Class-weighted cross-entropy averaged over the non-ignored pixels.

    logits (B, Nc, H, W), targets (B, H, W) class ids, weights (Nc,).
    """
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=logits.dtype)
    num_classes = logits.shape[1]
    if targets.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if weights.shape != (num_classes,):
        raise ShapeError(f"{weights.shape[0]} class weights for {num_classes} classes")
    labeled = targets != ignore_id
    count = int(labeled.sum())
    if count == 0:
        raise EmptyInputError("no labeled pixels for the loss")
    if ((targets[labeled] < 0) | (targets[labeled] >= num_classes)).any():
        raise FormatError(f"target class outside [0, {num_classes}) that is not ignore_id={ignore_id}")

    safe = np.where(labeled, targets, 0)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_prob = shifted - log_norm
    picked = np.take_along_axis(log_prob, safe[:, None], axis=1)[:, 0]
    pixel_weight = np.where(labeled, weights[safe], 0.0).astype(logits.dtype)
    loss = -(pixel_weight * picked).sum() / count

    def backward(grad):
        g = np.exp(log_prob) * pixel_weight[:, None]
        onehot = np.zeros_like(g)
        np.put_along_axis(onehot, safe[:, None], pixel_weight[:, None], axis=1)
        return ((g - onehot) * (grad / count),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# --- numerical checking ---

def grad_check(f, tensors, h=1e-6):
    """Max relative error between backward() and central differences.

    `f` is a zero-argument callable returning a scalar Tensor built from
    `tensors`; each coordinate x is stepped by h * max(1, |x|). The error per
    coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    for t in tensors:
        t.grad = None
    f().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, expected in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            step = h * max(1.0, abs(original))
            flat[i] = original + step
            upper = f().item()
            flat[i] = original - step
            lower = f().item()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * step)
            exact = expected.reshape(-1)[i]
            worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact)))
    for t in tensors:
        t.grad = None
    return worst

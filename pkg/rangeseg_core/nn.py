"""
nn.py

Layer library on top of tensor.py: a Module tree with deterministic
parameter names, the convolution / normalization building blocks the
network is assembled from, and plain SGD.

Parameter names are dotted paths ("backbone.encoder.3.pointwise.weight")
following attribute insertion order, so two models built from the same
ModelConfig enumerate identically.
"""

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """Learnable leaf tensor."""

    def __init__(self, data):
        super().__init__(np.array(data, copy=True), requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif name in self._buffers:
            self._buffers[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, module in self._modules.items():
            yield from module.named_buffers(f"{prefix}{name}.")

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for name, module in self._modules.items():
            yield from module.named_modules(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for module in self._modules.values():
            module.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters and buffers in place (float32 training, float64 checks)."""
        for _, module in self.named_modules():
            for p in module._parameters.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, buf in list(module._buffers.items()):
                module.register_buffer(name, buf.astype(dtype))
        return self

    def state_dict(self):
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_dict(self, state):
        expected = self.state_dict()
        missing = [name for name in expected if name not in state]
        unexpected = [name for name in state if name not in expected]
        if missing or unexpected:
            raise FormatError(f"checkpoint does not match the model (missing: {missing[:3]}, unexpected: {unexpected[:3]})")
        for name, current in expected.items():
            value = np.asarray(state[name])
            if value.shape != current.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {current.shape}")
            # running stats are updated in place by batch_norm, so copy into the existing arrays
            current[...] = value.astype(current.dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for module in modules:
            self.append(module)

    def append(self, module):
        setattr(self, str(len(self._modules)), module)
        return self

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, index):
        return list(self._modules.values())[index]


def count_parameters(model):
    """Learnable element count; running statistics are not counted."""
    return int(sum(p.data.size for p in model.parameters()))


def kaiming_uniform(shape, fan_in, rng, slope=0.01):
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _pair(value):
    return (value, value) if isinstance(value, int) else tuple(value)


class Conv2d(Module):
    """
    2D convolution over (B, C, H, W).

    :param padding: int, pair, or "same" (dilation * (k - 1) // 2 per side)
    :param circular: wrap the width axis instead of zero-padding it
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, dilation=1,
                 groups=1, bias=True, circular=False, rng=None, slope=0.01):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ConfigError(f"conv {in_channels}->{out_channels} is not divisible into {groups} groups")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = _pair(kernel_size)
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups
        self.circular = circular
        kh, kw = self.kernel_size
        fan_in = (in_channels // groups) * kh * kw
        self.weight = Parameter(kaiming_uniform((out_channels, in_channels // groups, kh, kw), fan_in, rng, slope))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def resolve_padding(self, dilation):
        if self.padding == "same":
            dh, dw = _pair(dilation)
            return dh * (self.kernel_size[0] - 1) // 2, dw * (self.kernel_size[1] - 1) // 2
        return _pair(self.padding)

    def forward(self, x, dilation=None):
        dilation = self.dilation if dilation is None else dilation
        ph, pw = self.resolve_padding(dilation)
        if self.circular and pw:
            x = T.pad_circular_width(x, pw)
            pw = 0
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=(ph, pw),
                        dilation=dilation, groups=self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)


class ConvBNAct(Module):
    """Conv -> BatchNorm -> LeakyReLU."""

    def __init__(self, in_channels, out_channels, kernel_size=1, stride=1, padding=0,
                 slope=0.01, eps=1e-5, momentum=0.1, rng=None, circular=False):
        super().__init__()
        self.slope = slope
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=padding,
                           circular=circular, rng=rng, slope=slope)
        self.bn = BatchNorm2d(out_channels, eps, momentum)

    def forward(self, x):
        return T.leaky_relu(self.bn(self.conv(x)), self.slope)


class SeparableConv(Module):
    """Depthwise 3x3 -> pointwise 1x1 -> BatchNorm -> LeakyReLU."""

    def __init__(self, in_channels, out_channels, stride=1, dilation=1, circular=False,
                 slope=0.01, eps=1e-5, momentum=0.1, rng=None):
        super().__init__()
        self.slope = slope
        self.depthwise = Conv2d(in_channels, in_channels, 3, stride=stride, padding="same",
                                dilation=dilation, groups=in_channels, circular=circular, rng=rng, slope=slope)
        self.pointwise = Conv2d(in_channels, out_channels, 1, rng=rng, slope=slope)
        self.bn = BatchNorm2d(out_channels, eps, momentum)

    def forward(self, x):
        return T.leaky_relu(self.bn(self.pointwise(self.depthwise(x))), self.slope)


def fitted_dilation(rate, height, width):
    """Largest dilation <= rate whose 3x3 kernel still fits the feature map."""
    return max(1, min(rate, (min(height, width) - 1) // 2))


class MultiDilationSeparableConv(Module):
    """Two depthwise 3x3 branches (dilation 1 and r) summed, then pointwise -> BN -> LeakyReLU."""

    def __init__(self, channels, dilation, circular=False, slope=0.01, eps=1e-5, momentum=0.1, rng=None):
        super().__init__()
        self.slope = slope
        self.rate = dilation
        self.depthwise = Conv2d(channels, channels, 3, padding="same", groups=channels,
                                circular=circular, rng=rng, slope=slope)
        self.dilated = Conv2d(channels, channels, 3, padding="same", dilation=dilation,
                              groups=channels, circular=circular, rng=rng, slope=slope)
        self.pointwise = Conv2d(channels, channels, 1, rng=rng, slope=slope)
        self.bn = BatchNorm2d(channels, eps, momentum)

    def forward(self, x):
        rate = fitted_dilation(self.rate, x.shape[2], x.shape[3])
        mixed = T.add(self.depthwise(x), self.dilated(x, dilation=rate))
        return T.leaky_relu(self.bn(self.pointwise(mixed)), self.slope)


class SGD:
    """p <- p - lr * (v), v = momentum * v + grad + weight_decay * p; grads cleared after each step."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [None] * len(self.params)

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            grad = p.grad
            if self.weight_decay:
                grad = grad + self.weight_decay * p.data
            if self.momentum:
                if self.velocity[i] is None:
                    self.velocity[i] = np.zeros_like(p.data)
                self.velocity[i] = self.momentum * self.velocity[i] + grad
                grad = self.velocity[i]
            p.data -= (lr * grad).astype(p.data.dtype)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def sgd_step(params, lr):
    """One plain descent step (no momentum, no decay); clears the grads."""
    SGD(params, lr).step()

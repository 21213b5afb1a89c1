"""Parameter containers and the convolution building block."""

import numpy as np

from . import ops
from .tensor import ContractError, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Parameter, Module)):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix=""):
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in getattr(self, "_buffers", {}).items():
            yield prefix + name, value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = set(own) | set(bufs)
        missing = sorted(expected - set(state))
        extra = sorted(set(state) - expected)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in state.items():
            target = own[name].data if name in own else bufs[name]
            if target.shape != arr.shape:
                raise ContractError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {target.shape}"
                )
            target[...] = arr


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ops.batch_norm(
            x, self.weight, self.bias,
            self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


class Conv(Module):
    """Convolution, optionally followed by batch norm and ReLU.

    Size-preserving padding ``(kernel - 1) // 2`` is the default. A conv that
    feeds batch norm carries no bias (the norm shift subsumes it).
    """

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=None,
                 norm=True, act=True, bias=None, dtype=np.float32):
        if kernel % 2 != 1 or kernel < 1:
            raise ContractError(f"kernel must be odd and positive, got {kernel}")
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        fan_in = in_ch * kernel * kernel
        w = rng.standard_normal((out_ch, in_ch, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.weight = Parameter(w.astype(dtype))
        use_bias = (not norm) if bias is None else bias
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if use_bias else None
        self.bn = BatchNorm2d(out_ch, dtype=dtype) if norm else None
        self.act = act

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise ContractError(f"Conv expects {self.in_ch} input channels, got {x.shape[1]}")
        y = ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        if self.bn is not None:
            y = self.bn(y)
        if self.act:
            y = ops.relu(y)
        return y


class ConvSeq(Module):
    """Chain of size-preserving norm+ReLU convs with the given kernel sizes."""

    def __init__(self, in_ch, out_ch, kernels, rng, dtype=np.float32):
        chans = [in_ch] + [out_ch] * len(kernels)
        self.layers = [Conv(chans[i], chans[i + 1], k, rng, dtype=dtype) for i, k in enumerate(kernels)]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Scalar(Module):
    """A single learnable real, stored with shape (1,)."""

    def __init__(self, value, dtype=np.float32):
        self.value = Parameter(np.array([value], dtype=dtype))

    def forward(self):
        return self.value

"""Parameter containers and the small layer set the networks are built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from evfi import tensor as T
from evfi.tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad)


class Module:
    """Attribute-walking parameter registry (Parameters, Modules, lists of Modules)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ChannelSymmetry:
    """How a channel block transforms under a horizontal mirror.

    ``perm[c]`` is the channel that lands on ``c`` and ``sign[c]`` its sign
    (``-1`` for the horizontal flow component).
    """

    def __init__(self, perm: np.ndarray, sign: np.ndarray):
        self.perm = np.asarray(perm, dtype=int)
        self.sign = np.asarray(sign, dtype=np.float64)

    @classmethod
    def scalar(cls, n: int) -> "ChannelSymmetry":
        return cls(np.arange(n), np.ones(n))

    @classmethod
    def flow(cls) -> "ChannelSymmetry":
        return cls(np.arange(2), np.array([-1.0, 1.0]))

    @classmethod
    def correlation(cls, radius: int) -> "ChannelSymmetry":
        d = 2 * radius + 1
        idx = np.arange(d * d).reshape(d, d)
        return cls(idx[:, ::-1].reshape(-1), np.ones(d * d))

    def __len__(self) -> int:
        return len(self.perm)

    @staticmethod
    def cat(*parts: "ChannelSymmetry") -> "ChannelSymmetry":
        perms, signs, off = [], [], 0
        for p in parts:
            perms.append(p.perm + off)
            signs.append(p.sign)
            off += len(p)
        return ChannelSymmetry(np.concatenate(perms), np.concatenate(signs))


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int = 3, stride: int = 1,
                 padding: int | None = None, groups: int = 1, bias: bool = True, zero_init: bool = False,
                 in_sym: ChannelSymmetry | None = None, out_sym: ChannelSymmetry | None = None):
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.groups = groups
        fan_in = (cin // groups) * k * k
        shape = (cout, cin // groups, k, k)
        w = np.zeros(shape) if zero_init else uniform_init(rng, shape, fan_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.in_sym = in_sym
        self.out_sym = out_sym

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def mirror_project(self) -> None:
        """Project weights onto the subspace that commutes with a horizontal flip."""
        w = self.weight.data
        cout, cin_g = w.shape[:2]
        if self.groups != 1:
            self.weight.data = 0.5 * (w + w[..., ::-1])
            return
        si = self.in_sym or ChannelSymmetry.scalar(cin_g)
        so = self.out_sym or ChannelSymmetry.scalar(cout)
        mirrored = w[so.perm][:, si.perm][..., ::-1] * so.sign[:, None, None, None] * si.sign[None, :, None, None]
        self.weight.data = 0.5 * (w + mirrored)
        if self.bias is not None:
            b = self.bias.data
            self.bias.data = 0.5 * (b + so.sign * b[so.perm])


class LayerNorm(Module):
    """Per-pixel normalization across the channel axis of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, 1, self.gamma, self.beta, self.eps)


class ConvBlock(Module):
    """Stack of 3x3 convs with leaky-ReLU (slope 0.1) between them; no activation after the last."""

    def __init__(self, rng, cin: int, hidden: int, cout: int, layers: int = 3, zero_last: bool = False,
                 in_sym: ChannelSymmetry | None = None, out_sym: ChannelSymmetry | None = None,
                 last_k: int = 3):
        dims = [cin] + [hidden] * (layers - 1) + [cout]
        self.convs = []
        for i in range(layers):
            last = i == layers - 1
            self.convs.append(Conv2d(rng, dims[i], dims[i + 1], k=last_k if last else 3,
                                     zero_init=zero_last and last,
                                     in_sym=in_sym if i == 0 else None,
                                     out_sym=out_sym if last else None))

    def __call__(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = T.leaky_relu(x, 0.1)
        return x

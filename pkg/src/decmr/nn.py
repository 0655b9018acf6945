"""Layer modules built on the autodiff tensor ops.

A Module is a thin container: it owns parameter tensors and child modules
and can enumerate them by dotted name for the optimizer and checkpoints.
Forward passes are explicit ``__call__`` chains; dropout layers receive
their rng and training flag through a Context object so inference stays a
pure function of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


@dataclass
class Context:
    """Per-forward state: training mode and the rng feeding dropout."""
    training: bool = False
    rng: Rng | None = None


class Module:
    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{key}.{i}", item))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng):
        self.w = T.kaiming((n_out, n_in), rng, fan_in=n_in, requires_grad=True)
        self.b = T.zeros((n_out,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class Conv(Module):
    """Cross-correlation conv, rank 2 or 3, no bias (norm layers follow)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rank: int, rng: Rng,
                 stride: int = 1, pad: int = 0):
        shape = (c_out, c_in) + (kernel,) * rank
        self.w = T.kaiming(shape, rng, fan_in=c_in * kernel ** rank, requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_nd(x, self.w, stride=self.stride, pad=self.pad)


class TransposeConv2d(Module):
    """Fixed k=2, s=2 upsampling conv for the U-Net decoder."""

    def __init__(self, c_in: int, c_out: int, rng: Rng):
        self.w = T.kaiming((c_in, c_out, 2, 2), rng, fan_in=c_in * 4, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.transpose_conv2d(x, self.w)


class InstanceNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = T.constant((channels,), 1.0, requires_grad=True)
        self.beta = T.zeros((channels,), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor, batched: bool = False) -> Tensor:
        return T.instance_norm(x, self.gamma, self.beta, eps=self.eps, batched=batched)


class PReLU(Module):
    """One learnable negative-side slope per layer, initialized to 0.25."""

    def __init__(self, init: float = 0.25):
        self.a = T.constant((), init, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.prelu(x, self.a)


class Dropout(Module):
    def __init__(self, p: float = 0.2):
        self.p = p

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        return T.dropout(x, self.p, ctx.rng, ctx.training)

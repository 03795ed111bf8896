"""Small layer helpers and the Adam optimizer used by every trainable part."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def parameters(self) -> list[Tensor]:
        params = []
        for value in vars(self).values():
            if isinstance(value, Tensor) and value.requires_grad:
                params.append(value)
            elif isinstance(value, Module):
                params.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for v in value:
                    if isinstance(v, Module):
                        params.extend(v.parameters())
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _param(arr, dtype):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False, dtype=np.float32):
        std = 0.0 if zero else math.sqrt(2.0 / n_in)
        self.weight = _param(rng.normal(0.0, 1.0, (n_in, n_out)) * std, dtype)
        self.bias = _param(np.zeros(n_out), dtype)

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return y + ad.broadcast_to(self.bias, y.shape)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, zero=False, dtype=np.float32):
        std = 0.0 if zero else math.sqrt(2.0 / (c_in * k * k))
        self.weight = _param(rng.normal(0.0, 1.0, (c_out, c_in, k, k)) * std, dtype)
        self.bias = _param(np.zeros(c_out), dtype)
        self.padding = k // 2

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, padding=self.padding)


class Adam:
    """Adam with bias correction; the learning rate is passed per step."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grads_finite(self):
        return all(p.grad is None or np.isfinite(p.grad).all() for p in self.params)

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)


def cosine_lr(step, total_steps, lr_init, lr_final):
    """Cosine annealing that hits ``lr_init`` at step 0 and ``lr_final`` at the last step."""
    if total_steps <= 1:
        return lr_init
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * frac))

"""Adam with layerwise learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def layer_lr(base_lr, alpha, depth):
    if base_lr <= 0 or not 0 < alpha <= 1 or depth < 0:
        raise ValueError(f"invalid layer_lr arguments base_lr={base_lr} alpha={alpha} depth={depth}")
    return base_lr * alpha**depth


@dataclass
class OptimConfig:
    base_lr: float = 1e-4
    alpha: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Bias-corrected Adam; each parameter's lr is ``base_lr * alpha**depth``.

    Moment state and step counts are kept per parameter, so parameters
    that receive no gradient in a step (heads of tasks absent from the
    batch) are left untouched.
    """

    def __init__(self, config, depths):
        self.config = config
        self.depths = dict(depths)
        self.lr = {n: layer_lr(config.base_lr, config.alpha, d) for n, d in self.depths.items()}
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, params, grads):
        c = self.config
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            v = self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            mhat = m / (1 - c.beta1**t)
            vhat = v / (1 - c.beta2**t)
            params[name] = p - self.lr[name] * mhat / (np.sqrt(vhat) + c.eps)
        return params

"""Adam with global-norm clipping and a plateau-then-cosine learning-rate schedule."""

import math

import numpy as np


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients by min(1, max_norm / ||g||); returns (clipped, norm)."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


def cosine_factor(step, total, start_frac=0.4):
    """1 until ``start_frac * total`` steps, then cosine decay reaching 0 at ``total``."""
    start = int(start_frac * total)
    if step < start or total <= start:
        return 1.0
    frac = min(1.0, (step - start) / (total - start))
    return 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam over named parameter groups ``{"name": (params, lr)}``.

    Moments are kept per parameter object, so parameters added later (new
    mixture components) start with fresh state.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, clip=1.0):
        self.groups = {k: (list(ps), float(lr)) for k, (ps, lr) in groups.items()}
        for _, lr in self.groups.values():
            if lr <= 0:
                raise ValueError("learning rates must be positive")
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.state = {}
        self.skipped = 0

    def add_params(self, group, params):
        ps, lr = self.groups[group]
        self.groups[group] = (ps + list(params), lr)

    def params(self):
        return [p for ps, _ in self.groups.values() for p in ps]

    def step(self, grads, lr_factor=1.0):
        """Apply one update; ``grads`` align with :meth:`params`.

        Non-finite gradients skip the update entirely (moments untouched) and
        return False.
        """
        params = self.params()
        if len(grads) != len(params):
            raise ValueError("one gradient per parameter expected")
        for p, g in zip(params, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            return False
        grads, _ = clip_by_global_norm(grads, self.clip)
        i = 0
        for ps, lr in self.groups.values():
            for p in ps:
                g = grads[i]
                i += 1
                st = self.state.setdefault(id(p), [np.zeros_like(p.data), np.zeros_like(p.data), 0])
                st[2] += 1
                st[0] = self.b1 * st[0] + (1.0 - self.b1) * g
                st[1] = self.b2 * st[1] + (1.0 - self.b2) * g * g
                mhat = st[0] / (1.0 - self.b1 ** st[2])
                vhat = st[1] / (1.0 - self.b2 ** st[2])
                p.data = p.data - lr * lr_factor * mhat / (np.sqrt(vhat) + self.eps)
        return True

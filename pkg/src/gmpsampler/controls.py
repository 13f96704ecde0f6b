"""Control networks u(x, t): tanh MLPs with a sinusoidal time embedding."""

import math

import numpy as np

from . import autodiff as ad


def time_embedding(t, width=32):
    """Sinusoidal features of ``t`` in [0, 1]: sin/cos at frequencies 2^j * pi."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = (2.0 ** np.arange(width // 2)) * math.pi
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class ControlNet:
    """Two hidden tanh layers of ``hidden`` units mapping (x, t) to R^d.

    The first layer is split into a state block and a time block so the time
    contribution for all steps of a trajectory can be computed with a single
    matmul (see :meth:`time_features`).
    """

    def __init__(self, dim, seed=0, hidden=128, emb_width=32, zero_final=True,
                 score_head=False, name="u"):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim, self.hidden, self.emb_width = dim, hidden, emb_width
        self.name = name
        rng = np.random.default_rng(seed)

        def dense(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)

        w1 = dense(dim + emb_width, hidden)
        self.W1x = ad.Parameter(w1[:dim], name=f"{name}.W1x")
        self.W1t = ad.Parameter(w1[dim:], name=f"{name}.W1t")
        self.b1 = ad.Parameter(np.zeros(hidden), name=f"{name}.b1")
        self.W2 = ad.Parameter(dense(hidden, hidden), name=f"{name}.W2")
        self.b2 = ad.Parameter(np.zeros(hidden), name=f"{name}.b2")
        w3 = np.zeros((hidden, dim)) if zero_final else dense(hidden, dim)
        self.W3 = ad.Parameter(w3, name=f"{name}.W3")
        self.b3 = ad.Parameter(np.zeros(dim), name=f"{name}.b3")
        self.score_head = None
        if score_head:
            # f2(t): scalar gate on the (detached) target score
            self.score_head = {
                "V1": ad.Parameter(dense(emb_width, 64), name=f"{name}.V1"),
                "c1": ad.Parameter(np.zeros(64), name=f"{name}.c1"),
                "V2": ad.Parameter(np.zeros((64, 1)), name=f"{name}.V2"),
                "c2": ad.Parameter(np.zeros(1), name=f"{name}.c2"),
            }

    def parameters(self):
        ps = [self.W1x, self.W1t, self.b1, self.W2, self.b2, self.W3, self.b3]
        if self.score_head is not None:
            ps += list(self.score_head.values())
        return ps

    def named_parameters(self):
        return {p.name.split(".", 1)[1]: p for p in self.parameters()}

    def time_features(self, n_steps):
        """First-layer time contribution for every index 0..N as a (N+1, hidden) tensor."""
        t = np.arange(n_steps + 1) / max(n_steps, 1)
        emb = time_embedding(t, self.emb_width)
        return emb @ self.W1t + self.b1, emb

    def __call__(self, x, n, n_steps, target=None, cache=None):
        return self.eval(x, n, n_steps, target=target, cache=cache)

    def eval(self, x, n, n_steps, target=None, cache=None):
        """u(x, n * dt) for a batch ``x`` of shape (B, d) at step ``n`` of ``n_steps``."""
        if not 0 <= n <= n_steps:
            raise ValueError(f"step index {n} outside [0, {n_steps}]")
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ad.ShapeError(f"control expects (B, {self.dim}) input, got {x.shape}")
        if cache is None:
            cache = self.time_features(n_steps)
        tfeat, emb = cache
        h = ad.dense(x, self.W1x, tfeat[n], "tanh")
        h = ad.dense(h, self.W2, self.b2, "tanh")
        out = ad.dense(h, self.W3, self.b3)
        if self.score_head is not None:
            if target is None:
                raise ValueError("score head needs the target")
            sh = self.score_head
            g = ad.tanh(emb[n] @ sh["V1"] + sh["c1"]) @ sh["V2"] + sh["c2"]
            out = out + g * target.score(ad.stop_gradient(x))
        return out

    def state_dict(self):
        return {k: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
                for k, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        if set(state) != set(params):
            raise ValueError(f"checkpoint keys {sorted(state)} do not match network {sorted(params)}")
        for k, p in params.items():
            arr = np.asarray(state[k]["data"], dtype=np.float64).reshape(state[k]["shape"])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr


def init_control(dim, seed, zero_final=True, **kwargs):
    return ControlNet(dim, seed=seed, zero_final=zero_final, **kwargs)

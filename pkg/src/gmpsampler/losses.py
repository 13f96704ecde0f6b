"""Training objectives over batches of simulated paths."""

from . import autodiff as ad

LOSSES = ("kl", "logvar")


def kl_loss(log_w):
    """Negative extended ELBO, -mean(log_w), from reparameterized paths."""
    log_w = ad.as_tensor(log_w)
    if log_w.size == 0:
        raise ValueError("kl_loss needs at least one path")
    return -ad.mean(log_w)


def logvar_loss(log_w):
    """Batch variance of log_w, where log_w was evaluated on detached paths.

    Gradients flow only through the log-density terms, so the variance is
    taken with respect to the current model acting as a fixed reference.
    """
    log_w = ad.as_tensor(log_w)
    if log_w.size < 2:
        raise ValueError("logvar_loss needs a batch of at least two paths")
    centered = log_w - ad.mean(log_w)
    return ad.mean(ad.square(centered))


def batch_loss(sampler, kind, rng, batch, comp_rng=None):
    """Simulate a batch for ``kind`` and return ``(loss, trajectory, log_w)``.

    Non-finite paths are dropped before the reduction.
    """
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")
    if kind == "kl":
        traj = sampler.simulate_forward(rng, batch, comp_rng=comp_rng)
        log_w = traj.log_w
    else:
        traj = sampler.simulate_forward(rng, batch, detach=True, comp_rng=comp_rng)
        log_w = sampler.path_log_weights(traj.states_np())
    if not traj.finite.all():
        log_w = log_w[traj.finite]
    loss = kl_loss(log_w) if kind == "kl" else logvar_loss(log_w)
    return loss, traj, log_w

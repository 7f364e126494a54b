import numpy as np


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check_params(params, grads, loss, h: float = 1e-5, max_per_entry: int | None = None, rng=None) -> float:
    """Worst relative error between analytic grads and central differences.

    Perturbs ``params.entries`` in place (restoring each value). Components where
    both derivatives are below 1e-7 in magnitude are compared absolutely.
    """
    worst = 0.0
    for name, value in params.entries.items():
        idxs = list(np.ndindex(value.shape))
        if max_per_entry is not None and len(idxs) > max_per_entry:
            pick = (rng or np.random.default_rng(0)).choice(len(idxs), max_per_entry, replace=False)
            idxs = [idxs[i] for i in pick]
        g = grads.get(name, np.zeros_like(value))
        for idx in idxs:
            old = value[idx]
            value[idx] = old + h
            hi = loss()
            value[idx] = old - h
            lo = loss()
            value[idx] = old
            fd = (hi - lo) / (2 * h)
            an = g[idx]
            if max(abs(fd), abs(an)) < 1e-7:
                err = abs(fd - an)
            else:
                err = rel_err(fd, an)
            worst = max(worst, err)
    return worst


def tiny_nets(rng, state_dim: int = 3, action_dim: int = 2, width: int = 5, image: bool = False, channels: int = 2, img: int = 8, shared_std: bool = False, enc_act: str = "leaky_relu"):
    """Small AgentNets for gradient and contract checks.

    With ``image`` the actor reads images and the critics read state plus image.
    ``shared_std`` switches the actor to one free log-std per action dimension.
    Returns (nets, specs).
    """
    from dmfd import nn
    from dmfd.agent import NetSpecs, init_nets

    enc = None
    feat = 0
    if image:
        enc = nn.ConvEncoderSpec(n_conv_layers=2, channels=channels, kernel=3, stride=2, dense_widths=(4,), image_size=img, activation=enc_act)
        feat = enc.feature_size
    specs = NetSpecs(
        state_dim,
        action_dim,
        "image" if image else "state",
        "state_plus_image" if image else "state",
        nn.MlpSpec(
            (feat if image else state_dim, width, width, action_dim if shared_std else 2 * action_dim),
            "tanh",
            "linear" if shared_std else "gaussian_policy",
        ),
        nn.MlpSpec((feat + state_dim + action_dim, width, width, 1), "tanh", "linear"),
        enc,
        (1.0,) * state_dim,
        shared_std,
    )
    nets = init_nets(specs, rng)
    if shared_std:
        nets.actor.entries["log_std"][:] = rng.uniform(-1.0, 0.5, size=action_dim)
    return nets, specs


def tiny_batch(specs, n: int, rng):
    from dmfd.agent import Batch

    images = next_images = None
    if specs.encoder is not None:
        size = specs.encoder.image_size
        images = rng.uniform(size=(n, size, size, 3))
        next_images = rng.uniform(size=(n, size, size, 3))
    return Batch(
        rng.normal(size=(n, specs.state_dim)),
        images,
        rng.uniform(-0.95, 0.95, size=(n, specs.action_dim)),
        rng.normal(size=n),
        rng.normal(size=(n, specs.state_dim)),
        next_images,
        (rng.uniform(size=n) < 0.3).astype(np.float64),
        np.zeros(n, dtype=bool),
    )

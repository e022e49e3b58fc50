import numpy as np
import pytest

from radssl.dataio import PhantomSpec, generate_phantoms


@pytest.fixture(scope="session")
def small_phantoms():
    return generate_phantoms(PhantomSpec(num_volumes=12, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_relative_error(loss_fn, tensors, n_coords=None, h=1e-6, rng=None):
    """Relative error between autograd and central differences.

    ``tensors`` are float64 leaves with ``requires_grad``; ``n_coords`` limits
    the check to a random subset of coordinates.
    """
    import torch
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    coords = [(i, j) for i, t in enumerate(tensors) for j in range(t.numel())]
    if n_coords is not None and n_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        coords = [coords[k] for k in rng.choice(len(coords), n_coords, replace=False)]
    ana, num = [], []
    with torch.no_grad():
        for i, j in coords:
            flat = tensors[i].view(-1)
            g = tensors[i].grad
            ana.append(0.0 if g is None else float(g.view(-1)[j]))
            old = float(flat[j])
            flat[j] = old + h
            fp = float(loss_fn())
            flat[j] = old - h
            fm = float(loss_fn())
            flat[j] = old
            num.append((fp - fm) / (2 * h))
    ana, num = np.array(ana), np.array(num)
    return float(np.linalg.norm(ana - num) / max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12))


@pytest.fixture
def fd_check():
    return fd_relative_error

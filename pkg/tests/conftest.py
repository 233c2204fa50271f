import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_gradient(fn, tensor, eps=1e-5):
    """Central finite-difference gradient of scalar fn w.r.t. tensor, computed
    coordinate by coordinate with pure forward evaluations (independent of
    autograd)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn())
            flat[i] = orig - eps
            lo = float(fn())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def gradcheck_against_fd(fn, tensors, rel_tol=1e-3, min_pass_fraction=0.99, eps=1e-5):
    """Compare autograd gradients with the finite-difference oracle.

    `fn` evaluates the scalar objective from the current tensor values.
    Returns the worst per-tensor pass fraction.
    """
    for t in tensors:
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    value = fn()
    value.backward()
    worst = 1.0
    for t in tensors:
        analytic = t.grad.detach().clone()
        t.requires_grad_(False)
        numeric = fd_gradient(fn, t.data, eps=eps)
        denom = torch.maximum(
            torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, 1e-6)
        )
        rel = (analytic - numeric).abs() / denom
        frac = float((rel < rel_tol).double().mean())
        worst = min(worst, frac)
        assert frac >= min_pass_fraction, (
            f"gradient mismatch: only {frac:.3f} of coordinates within {rel_tol}"
        )
    return worst

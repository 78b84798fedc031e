"""Shared test utilities: central finite-difference gradient verification."""

import torch


def finite_difference_check(model, loss_fn, rtol=1e-3, atol=1e-6, eps=1e-5):
    """Compare autograd gradients of loss_fn(model) against central differences.

    ``loss_fn`` must be deterministic (reseed any randomness internally) and
    the model must already be in float64. Returns a list of mismatches
    (param name, flat index, analytic, numeric); empty means the check passed.
    """
    model.zero_grad()
    loss = loss_fn(model)
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    failures = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.data.reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn(model))
                flat[i] = orig - eps
                down = float(loss_fn(model))
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                analytic = float(gflat[i])
                if abs(analytic - numeric) > atol + rtol * max(
                    abs(analytic), abs(numeric)
                ):
                    failures.append((name, i, analytic, numeric))
    return failures


def count_params(model):
    return sum(p.numel() for p in model.parameters())

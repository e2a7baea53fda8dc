"""Central finite-difference gradient checking.

Independent of autograd internals: a scalar-valued closure is re-evaluated
with each parameter element nudged by +/-h, and the two-sided slope is
compared against the analytic gradient.  Everything runs in float64.
"""

import torch

STEP = 1e-5
RTOL = 1e-4
ATOL = 1e-6


def fd_gradcheck(fn, tensors, step=STEP, rtol=RTOL, atol=ATOL, subsample=None):
    """Check d fn() / d t for every element of every tensor in `tensors`.

    fn: nullary closure returning a scalar tensor (recomputed from scratch
    on every call). tensors: leaf float64 tensors with requires_grad.
    subsample: optionally check only every n-th element (for big tensors).
    """
    for t in tensors:
        assert t.dtype == torch.float64, "finite differences need float64"
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=False)
    worst = 0.0
    for tensor, grad in zip(tensors, grads):
        flat = tensor.detach().reshape(-1)
        gflat = grad.reshape(-1)
        idx = range(0, flat.numel(), subsample or 1)
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn())
            flat[i] = orig - step
            lo = float(fn())
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            analytic = float(gflat[i])
            err = abs(analytic - numeric)
            bound = atol + rtol * max(abs(analytic), abs(numeric))
            assert err <= bound, (
                f"gradient mismatch at element {i}: analytic={analytic:.10g} "
                f"numeric={numeric:.10g} err={err:.3g} bound={bound:.3g}"
            )
            worst = max(worst, err)
    return worst


def module_params(module):
    """All parameters of a float64-converted module, ready for fd_gradcheck."""
    params = [p for p in module.parameters() if p.requires_grad]
    assert params, "module has no parameters"
    return params

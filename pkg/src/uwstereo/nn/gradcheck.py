"""Central finite-difference gradient verification.

Checks run on a float64 copy of the network so the comparison tolerance
is limited by the step size, not by float32 rounding.
"""

import numpy as np

from .network import Grads, Network


def numeric_param_grads(net: Network, feeds, loss_fn, step=1e-3) -> Grads:
    """Finite-difference gradients of loss_fn(net.forward(feeds)) w.r.t.
    every parameter and every graph input."""
    grads = Grads()
    for node in net.param_nodes():
        for attr in ("weight", "bias"):
            arr = getattr(node.layer, attr)
            g = np.zeros_like(arr)
            flat = arr.ravel()
            gflat = g.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = loss_fn(net.forward(feeds))
                flat[i] = orig - step
                lo = loss_fn(net.forward(feeds))
                flat[i] = orig
                gflat[i] = (hi - lo) / (2 * step)
            if attr == "weight":
                grads.params[node.name] = (g, None)
            else:
                dw, _ = grads.params[node.name]
                grads.params[node.name] = (dw, g)
    normalized = net._normalize_feeds(feeds)
    for name, arr in normalized.items():
        arr = np.array(arr)
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fd = dict(normalized)
            fd[name] = arr
            hi = loss_fn(net.forward(fd))
            flat[i] = orig - step
            lo = loss_fn(net.forward(fd))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.inputs[name] = g
    return grads


def max_relative_error(analytic: Grads, numeric: Grads, floor=1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor) over all gradients."""
    worst = 0.0
    pairs = []
    for name, (dw, db) in analytic.params.items():
        nw, nb = numeric.params[name]
        pairs.append((dw, nw))
        pairs.append((db, nb))
    for name, g in analytic.inputs.items():
        pairs.append((g, numeric.inputs[name]))
    for a, n in pairs:
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_gradients(net: Network, feeds, loss_fn, loss_grad_fn, step=1e-3) -> float:
    """Compare analytic backprop with central differences.

    Returns the max relative error across all parameters and inputs.
    loss_fn maps the network output to a scalar; loss_grad_fn gives the
    gradient of that scalar w.r.t. the output.
    """
    net64 = net.astype(np.float64)
    feeds64 = {k: np.asarray(v, dtype=np.float64)
               for k, v in net64._normalize_feeds(feeds).items()}
    out, tape = net64.forward(feeds64, record=True)
    analytic = net64.backward(tape, loss_grad_fn(out))
    numeric = numeric_param_grads(net64, feeds64, loss_fn, step=step)
    return max_relative_error(analytic, numeric)

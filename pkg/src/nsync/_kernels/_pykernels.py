"""Pure numpy fused MLP kernels.

Network: ``h_0 = x``, ``h_{l+1} = silu(h_l W_l + b_l)`` for hidden layers,
linear output layer. All arrays are C-contiguous float64.
"""

import numpy as np

BACKEND = "python"


def _silu(a):
    sig = 1.0 / (1.0 + np.exp(-a))
    return a * sig, sig


def mlp_forward(x, weights, biases):
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        a = h @ w + b
        h = a if i == last else _silu(a)[0]
    return h


def mlp_loss_grad(x, target, weights, biases, want_weights=True):
    """Mean squared error of the MLP output against ``target`` and its gradients.

    Returns ``(loss, dx, dweights, dbiases)``; the last two are ``None`` when
    ``want_weights`` is false.
    """
    acts = [x]
    pre = []
    sigs = []
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        a = h @ w + b
        if i == last:
            h = a
        else:
            h, sig = _silu(a)
            pre.append(a)
            sigs.append(sig)
            acts.append(h)
    diff = h - target
    loss = float(np.mean(diff * diff))
    g = diff * (2.0 / diff.size)

    dws = [None] * len(weights) if want_weights else None
    dbs = [None] * len(weights) if want_weights else None
    for i in range(last, -1, -1):
        if i != last:
            a, sig = pre[i], sigs[i]
            g = g * sig * (1.0 + a * (1.0 - sig))
        if want_weights:
            dws[i] = acts[i].T @ g
            dbs[i] = g.sum(axis=0)
        g = g @ weights[i].T
    return loss, g, dws, dbs

"""Central finite-difference check of the LSTM gradients."""

import numpy as np

from fastgrant.lstm import LstmNetwork, forward_sequence, loss_and_grads


def gradient_check(I=3, hidden=(4, 3), T=5, B=2, dropout=0.3, h=1e-5, seed=0):
    """Largest relative error, per parameter name, between BPTT and central differences."""
    rng = np.random.default_rng(seed)
    net = LstmNetwork(I, hidden, dropout=dropout, seed=seed)
    X = rng.normal(size=(T, B, I))
    targets = rng.random((T, B))
    # fixed masks so the perturbed passes see the same dropout pattern
    _, cache = forward_sequence(net, X, mode="train", rng=rng)
    masks = cache.masks

    def loss_at():
        _, c = forward_sequence(net, X, mode="train", masks=masks)
        return loss_and_grads(net, c, targets)[0]

    _, grads = loss_and_grads(net, cache, targets)
    worst = {}
    for name, p in net.params().items():
        err = 0.0
        flat = p.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_at()
            flat[k] = orig - h
            down = loss_at()
            flat[k] = orig
            num = (up - down) / (2 * h)
            ana = grads[name].reshape(-1)[k]
            err = max(err, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
        worst[name] = err
    return worst

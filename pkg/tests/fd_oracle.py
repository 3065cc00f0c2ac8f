"""Central finite-difference gradient oracle for the reduced INR.

ReLU networks are only piecewise smooth: a perturbation of +/-h can flip a
unit across its kink and the central difference then measures a blend of
two slopes. For every perturbed entry the oracle compares the activation
pattern at theta-h, theta and theta+h and shrinks h (by 10x, down to
``h_min``) until all three agree, so the quotient is taken inside one
linear piece.
"""

import numpy as np

from isoinr.model import Batch, backward, draw_masks, forward_batch, init_model, loss_final


def reduced_model(seed, n_labels=3, width=64, n_fourier=8, sigma_b=1.0, dropout_p=0.1):
    table = {i: f"l{i}" for i in range(n_labels)}
    return init_model(table, n_fourier=n_fourier, width=width, sigma_b=sigma_b, dropout_p=dropout_p,
                      seed=seed, dtype=np.float64)


def random_batch(rng, n1, n2, n_labels):
    y = np.zeros((n2, n_labels))
    y[np.arange(n2), rng.integers(0, n_labels, n2)] = 1.0
    return Batch(rng.uniform(-1, 1, (n1, 3)), rng.uniform(0, 1, n1), rng.uniform(-1, 1, (n2, 3)), rng.uniform(0, 1, n2), y)


def _loss_and_pattern(m, batch, masks):
    preds, cache = forward_batch(m, batch, training=True, masks=masks)
    parts = [a > 0 for a in cache["acts"][1:]] + [h > 0 for h in cache["h"].values()] + [cache["seg_inside"]]
    pattern = np.concatenate([p.ravel() for p in parts])
    return loss_final(preds, batch, reduction="mean"), pattern


def check_gradients(m, batch, h=1e-3, h_min=1e-7, floor=1e-6):
    """Max relative error per parameter between backward() and finite differences."""
    masks = draw_masks(m, batch.n1 + batch.n2)
    preds, cache = forward_batch(m, batch, training=True, masks=masks)
    grads = backward(m, preds, cache, batch, reduction="mean")
    _, base = _loss_and_pattern(m, batch, masks)
    errors = {}
    refined = 0
    for name, p in m.params.items():
        flat = p.reshape(-1)
        num = np.empty(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            step = h
            while True:
                flat[j] = orig + step
                lp, pat_p = _loss_and_pattern(m, batch, masks)
                flat[j] = orig - step
                lm, pat_m = _loss_and_pattern(m, batch, masks)
                flat[j] = orig
                same = np.array_equal(pat_p, base) and np.array_equal(pat_m, base)
                if same or step / 10 < h_min:
                    break
                step /= 10
                refined += 1
            num[j] = (lp - lm) / (2 * step)
        ana = grads[name].reshape(-1)
        rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        errors[name] = float(rel.max())
    return errors, refined, grads

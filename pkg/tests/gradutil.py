"""Central finite-difference gradient checking."""
import numpy as np

STEP = 1e-5
FLOOR = 1e-6  # gradients smaller than this are compared absolutely


def sample_indices(rng, arrays, n):
    """``n`` (name, flat index) pairs drawn across all arrays, proportional to size."""
    names = list(arrays)
    sizes = np.array([arrays[k].size for k in names], float)
    picks = []
    for _ in range(n):
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        picks.append((k, int(rng.integers(arrays[k].size))))
    return picks


def check_gradients(loss_fn, arrays, analytic, rng, n=50, step=STEP):
    """Worst relative error between ``analytic`` and central differences of ``loss_fn``.

    ``loss_fn()`` must read the current contents of ``arrays`` (perturbed in place).
    """
    worst = 0.0
    for name, i in sample_indices(rng, arrays, n):
        a = arrays[name].reshape(-1)
        old = a[i]
        a[i] = old + step
        up = float(loss_fn())
        a[i] = old - step
        down = float(loss_fn())
        a[i] = old
        num = (up - down) / (2 * step)
        ana = float(analytic[name].reshape(-1)[i])
        err = abs(num - ana) / max(abs(num), abs(ana), FLOOR)
        worst = max(worst, err)
    return worst

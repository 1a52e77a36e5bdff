"""Central finite-difference oracle, independent of the tape."""
import numpy as np

from bevda.engine import Tape, backward

H = 1e-5


def numeric_grad(f, arrays, i, h=H, coords=None):
    """d f(*arrays) / d arrays[i] by central differences; f returns a float.

    ``coords`` restricts the probe to those flat indices (others stay 0).
    """
    x = arrays[i]
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in (range(flat.size) if coords is None else coords):
        old = flat[k]
        flat[k] = old + h
        fp = f(*arrays)
        flat[k] = old - h
        fm = f(*arrays)
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), floor))


def tape_grads(build, params):
    """Gradients of the scalar ``build(*params)`` w.r.t. each Tensor in ``params``."""
    for p in params:
        p.grad = None
    tape = Tape()
    with tape:
        loss = build(*params)
    backward(loss, tape)
    return [p.grad for p in params]


def check(build, params, h=H, sample=None, seed=0):
    """Max relative error between tape and finite-difference gradients.

    A central difference that straddles a ReLU or L1 kink is not a valid
    reference, so each parameter is also probed with a 100x smaller step and
    the closer estimate is kept.  ``sample`` limits each parameter to that many
    randomly chosen entries, for spot checks of large weight tensors.
    """
    from bevda.engine import Tensor

    analytic = tape_grads(build, params)
    arrays = [p.data for p in params]
    rng = np.random.default_rng(seed)

    def f(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    # parameters whose true gradient is zero (a bias feeding a norm) are judged
    # against the overall gradient scale, not against their own rounding noise
    floor = max(1e-8, 1e-6 * max(float(np.abs(g).max()) for g in analytic))
    worst = 0.0
    for i, a in enumerate(arrays):
        coords = None
        if sample is not None and a.size > sample:
            coords = np.sort(rng.choice(a.size, sample, replace=False))
        want = analytic[i].reshape(-1) if coords is None else analytic[i].reshape(-1)[coords]
        errs = []
        for step in (h, h / 100):
            got = numeric_grad(f, arrays, i, step, coords).reshape(-1)
            errs.append(rel_err(want, got if coords is None else got[coords], floor))
        worst = max(worst, min(errs))
    return worst

"""Helpers for finite-difference checks of single numcore operations."""
import numpy as np

from cellseg.numcore import Tape, Tensor
from cellseg.numcore.gradcheck import finite_difference, relative_error
from cellseg.numcore.tensor import make_result


def project(x: Tensor, r: np.ndarray) -> Tensor:
    """Scalar <x, r>; turns any op output into a loss for gradient checks."""
    rr = r.astype(x.dtype)
    val = np.asarray((x.data * rr).sum(), dtype=x.dtype)
    return make_result(val, (x,), lambda g: (g * rr,), "project")


def check_op(fn, arrays, analytic_dtype=np.float32, h=1e-3, seed=0):
    """Max relative error between tape gradients and central differences.

    ``fn(*tensors)`` returns a scalar tensor. Analytic gradients are computed
    in ``analytic_dtype``; finite differences always recompute in float64.
    """
    tensors = [Tensor(a, requires_grad=True, dtype=analytic_dtype) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    grads = tape.backward(loss)

    f64 = [np.array(a, dtype=np.float64) for a in arrays]

    def loss_fn():
        return fn(*[Tensor(a, dtype=np.float64) for a in f64]).item()

    worst = 0.0
    for t, arr in zip(tensors, f64):
        idx = list(np.ndindex(arr.shape))
        numeric = finite_difference(loss_fn, arr, idx, h=h)
        analytic = np.array([grads[t][i] for i in idx]) if t in grads else np.zeros(len(idx))
        # entries whose gradient is tiny relative to the tensor are judged at that scale
        floor = 1e-3 * max(np.abs(numeric).max(), 1e-12) if analytic_dtype == np.float32 else 1e-10
        worst = max(worst, relative_error(analytic, numeric, floor=floor))
    return worst


def model_gradcheck(model, x, y, loss_fn, per_tensor=1, h=1e-3, seed=0, floor_frac=1e-2):
    """Worst relative error over sampled entries of every parameter tensor.

    ``model`` should already be float64; the loss is recomputed in train mode
    for every finite-difference probe.
    """
    from cellseg.microcellseg import forward
    from cellseg.numcore.gradcheck import sample_indices

    rng = np.random.default_rng(seed)
    with Tape() as tape:
        loss = loss_fn(forward(model, x, "train"), y)
    grads = tape.backward(loss)

    def loss_value():
        return loss_fn(forward(model, x, "train"), y).item()

    worst, where = 0.0, None
    for name, t in model.params.items():
        idx = sample_indices(t.shape, per_tensor, rng)
        numeric = finite_difference(loss_value, t.data, idx, h=h)
        analytic = np.array([grads[t][i] for i in idx])
        # O(h^2) truncation dominates entries far below the tensor's gradient scale
        floor = max(floor_frac * float(np.abs(grads[t]).max()), 1e-8)
        err = relative_error(analytic, numeric, floor=floor)
        if err > worst:
            worst, where = err, name
    return worst, where

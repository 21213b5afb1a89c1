"""Central finite-difference verification of analytic gradients."""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class GradcheckReport:
    name: str
    passed: bool
    max_rel_err: float
    n_checked: int
    tol: float
    # (input index, flat element, analytic, numeric) of the worst element
    worst: tuple = None

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        line = f"{status} {self.name}: max rel err {self.max_rel_err:.2e} over {self.n_checked} elements (tol {self.tol:g})"
        if not self.passed and self.worst is not None:
            i, j, a, n = self.worst
            line += f"; worst input {i} element {j}: analytic {a:.6e} vs numeric {n:.6e}"
        return line


def rel_error(analytic, numeric, atol):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)


def gradcheck(fn, inputs, eps=1e-4, tol=1e-3, atol=1e-5, max_checks=None, seed=0, name="op"):
    """Compare d(sum(fn(*inputs) * R))/d(inputs) analytically and numerically.

    ``R`` is a fixed random projection so every output element contributes.
    Only inputs with ``requires_grad`` are checked. With ``max_checks`` set, a
    random subset of that many (input, element) pairs is checked. Relative
    error is ``|a - n| / max(|a|, |n|, atol)``.
    """
    rng = np.random.default_rng(seed)
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape).astype(out.dtype)
    if out.ndim == 0:
        proj = np.asarray(1.0, dtype=out.dtype)
    out.backward(proj)
    targets = [(i, t) for i, t in enumerate(inputs) if t.requires_grad]
    analytic = {i: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy() for i, t in targets}

    pairs = [(i, j) for i, t in targets for j in range(t.data.size)]
    if max_checks is not None and len(pairs) > max_checks:
        pick = rng.choice(len(pairs), size=max_checks, replace=False)
        pairs = [pairs[p] for p in sorted(pick)]

    def objective():
        return float((fn(*inputs).data * proj).sum())

    worst, max_err = None, 0.0
    for i, j in pairs:
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = objective()
        flat[j] = orig - eps
        down = objective()
        flat[j] = orig
        num = (up - down) / (2 * eps)
        ana = float(analytic[i].reshape(-1)[j])
        err = float(rel_error(ana, num, atol))
        if worst is None or err > max_err:
            max_err, worst = err, (i, j, ana, num)
    return GradcheckReport(name, max_err <= tol, max_err, len(pairs), tol, worst)


def as_inputs(arrays, dtype=np.float64):
    return [Tensor(np.asarray(a, dtype=dtype), requires_grad=True) for a in arrays]

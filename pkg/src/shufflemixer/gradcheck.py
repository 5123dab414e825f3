"""Central finite-difference audits of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[], float], x: np.ndarray, index, step: float = 1e-5) -> float:
    """d f / d x[index] by central differences, perturbing ``x`` in place."""
    orig = x[index]
    x[index] = orig + step
    fp = f()
    x[index] = orig - step
    fm = f()
    x[index] = orig
    return (fp - fm) / (2.0 * step)


@dataclass
class SiteReport:
    name: str
    checked: int
    max_rel_error: float
    worst_index: tuple

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def check_function(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
                   seed: int = 0, max_per_input: Optional[int] = None,
                   names: Optional[Sequence[str]] = None) -> list[SiteReport]:
    """Compare backward of ``sum(fn(*inputs) * R)`` against central differences.

    ``R`` is a fixed random projection so that gradients are generic rather
    than structurally zero.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)

    def loss_value() -> float:
        with no_grad():
            return float(np.sum(fn(*inputs).data * proj))

    for t in inputs:
        t.grad = None
    loss = (out * Tensor(proj.astype(out.dtype))).sum()
    backward(loss)

    reports = []
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = list(np.ndindex(t.shape))
        if max_per_input is not None and len(flat) > max_per_input:
            pick = rng.choice(len(flat), size=max_per_input, replace=False)
            flat = [flat[i] for i in sorted(pick)]
        worst, worst_idx = 0.0, ()
        for idx in flat:
            num = numeric_grad(loss_value, t.data, idx, step)
            err = float(relative_error(analytic[idx], num))
            if err > worst:
                worst, worst_idx = err, idx
        label = names[k] if names else f"input{k}"
        reports.append(SiteReport(label, len(flat), worst, worst_idx))
    return reports


# ---------------------------------------------------------------------------
# audit suites
# ---------------------------------------------------------------------------

def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=np.float64)


def primitive_cases(seed: int = 0) -> list[tuple[str, Callable, list]]:
    """One small 64-bit case per registered primitive: ``(kind, fn, inputs)``."""
    from . import ops

    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    away = lambda *s: np.sign(r(*s)) * rng.uniform(0.2, 1.5, s)  # noqa: E731  relu-safe
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    return [
        ("add", ops.add, [_t(r(3, 4)), _t(r(4))]),
        ("sub", ops.sub, [_t(r(3, 4)), _t(r(3, 1))]),
        ("mul", ops.mul, [_t(r(2, 3, 4)), _t(r(3, 4))]),
        ("div", ops.div, [_t(r(3, 4)), _t(rng.uniform(0.5, 1.5, (3, 4)))]),
        ("scale", lambda x: ops.scale(x, -1.7), [_t(r(3, 4))]),
        ("sigmoid", ops.sigmoid, [_t(r(3, 4) * 2)]),
        ("gelu", ops.gelu, [_t(r(3, 4) * 2)]),
        ("relu", ops.relu, [_t(away(3, 4))]),
        ("softmax", ops.softmax, [_t(r(3, 5))]),
        ("log_softmax", ops.log_softmax, [_t(r(3, 5))]),
        ("sum", lambda x: ops.sum(x, axis=(0, 2)), [_t(r(2, 3, 4))]),
        ("mean", lambda x: ops.mean(x, axis=1, keepdims=True), [_t(r(2, 3, 4))]),
        ("max", lambda x: ops.max(x, axis=-1), [_t(r(3, 6))]),
        ("matmul", ops.matmul, [_t(r(2, 3, 4)), _t(r(4, 5))]),
        ("reshape", lambda x: ops.reshape(x, (4, 6)), [_t(r(2, 3, 4))]),
        ("permute", lambda x: ops.permute(x, (2, 0, 1)), [_t(r(2, 3, 4))]),
        ("concat", lambda a, b: ops.concat([a, b], axis=1), [_t(r(2, 3)), _t(r(2, 2))]),
        ("narrow", lambda x: ops.narrow(x, 1, 1, 2), [_t(r(3, 4))]),
        ("take", lambda t: ops.take(t, np.array([[0, 2], [2, 1], [0, 0]])), [_t(r(3, 4))]),
        ("batch_norm", lambda x, g, b: ops.batch_norm(x, g, b, groups=3, update_stats=False),
         [_t(r(6, 2, 2, 3)), _t(rng.uniform(0.5, 1.5, 3)), _t(r(3))]),
        ("batch_norm(eval)", lambda x, g, b: ops.batch_norm(x, g, b, rm, rv, training=False),
         [_t(r(4, 3)), _t(r(3)), _t(r(3))]),
        ("layer_norm", ops.layer_norm, [_t(r(3, 5)), _t(rng.uniform(0.5, 1.5, 5)), _t(r(5))]),
        ("patches", lambda x: ops.patches(x, (3, 3), (2, 2), (1, 1)), [_t(r(2, 5, 5, 3))]),
    ]


def audit_primitives(seed: int = 0, step: float = 1e-5) -> list[SiteReport]:
    reports = []
    for kind, fn, inputs in primitive_cases(seed):
        names = [f"{kind}[{i}]" for i in range(len(inputs))]
        reports += check_function(fn, inputs, step=step, seed=seed, names=names)
    return reports


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _projected_difference(output, proj, x, index, step, base=None, shrink: int = 3):
    """Derivative of ``sum(output() * proj)`` with respect to ``x[index]``.

    Central differences are taken per output element before projecting, so
    the change is not lost in the rounding of one large sum.  Steps ``h`` and
    ``h/2`` are combined by Richardson extrapolation (error O(h^4)).  With
    ``base`` (branch records of the unperturbed forward) a stencil that makes
    any max/relu take a different branch is retried with a 10x smaller step,
    up to ``shrink`` times.  Returns ``(estimate, step used, smooth)``.
    """
    from .ops import record_branches

    orig = x[index]

    def central(h):
        ok = True
        diffs = []
        for sign in (1.0, -1.0):
            with record_branches() as rec:
                x[index] = orig + sign * h
                diffs.append(output())
            ok = ok and (base is None or _same_branches(rec, base))
        x[index] = orig
        return float(np.sum((diffs[0] - diffs[1]) * proj) / (2.0 * h)), ok

    for _ in range(shrink + 1):
        d1, ok1 = central(step)
        d2, ok2 = central(step / 2)
        if ok1 and ok2:
            return (4.0 * d2 - d1) / 3.0, step, True
        step /= 10.0
    return (4.0 * d2 - d1) / 3.0, step * 10.0, False


class Site(NamedTuple):
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    step: float
    structural_zero: bool


# |analytic| at or below this is an exact structural zero (e.g. key biases,
# which softmax shift invariance cancels); rounding leaves it near 1e-20.
ZERO_GRAD = 1e-12


@dataclass
class NetworkAudit:
    sites: list  # of Site
    seconds: float

    @property
    def checked(self) -> list:
        return [s for s in self.sites if not s.structural_zero]

    @property
    def max_rel_error(self) -> float:
        return max((s.rel_error for s in self.checked), default=0.0)

    @property
    def gradient_scale(self) -> float:
        """Median |analytic| over checked sites."""
        return float(np.median([abs(s.analytic) for s in self.checked])) if self.checked else 0.0

    def failures(self, tol: float) -> list:
        """Checked sites at or above ``tol``; structural zeros whose difference
        quotient exceeds ``tol`` times the gradient scale."""
        zero_tol = tol * self.gradient_scale
        return [s for s in self.sites
                if (not abs(s.numeric) <= zero_tol if s.structural_zero else not s.rel_error < tol)]


def audit_network(config=None, samples: int = 200, seed: int = 0, step: float = 1e-5,
                  batch: int = 2, jitter: float = 0.3) -> NetworkAudit:
    """Finite-difference audit of a whole 64-bit network.

    Batch norm runs on batch statistics with running updates frozen, so
    every perturbed forward is the same function.  Every parameter tensor
    gets at least one probe; the rest are drawn in proportion to size until
    ``samples`` probes have a nonzero analytic gradient.  Structural zeros
    are checked in absolute terms instead.

    The check runs at a generic point: seeded Gaussian ``jitter`` is added to
    every parameter.  At the raw initialisation, biases are zero and the chains
    of small projections leave many gradients near 1e-10, below what a
    64-bit central difference can resolve.

    A stencil that flips a max or relu branch is retried with smaller steps;
    if it never stays on one piece the site is reported with infinite error.
    """
    import time

    from .network import TINY_CONFIG, build_model
    from .nn import freeze_batch_stats
    from .ops import record_branches

    t0 = time.perf_counter()
    cfg = config or TINY_CONFIG
    model = build_model(cfg, seed, dtype=np.float64)
    model.train()
    freeze_batch_stats(model, True)
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data += jitter * rng.standard_normal(p.shape)
    n = cfg.input_size
    x = Tensor(rng.standard_normal((batch, n, n, n, cfg.in_channels)), dtype=np.float64)
    params = list(model.named_parameters())
    with no_grad():
        proj = rng.standard_normal(model(x).shape)

    def output() -> np.ndarray:
        with no_grad():
            return model(x).data

    model.zero_grad()
    backward((model(x) * Tensor(proj)).sum())
    with record_branches() as base:
        output()

    def draw(k: int) -> tuple:
        return tuple(int(i) for i in np.unravel_index(rng.integers(params[k][1].size), params[k][1].shape))

    sizes = np.array([p.size for _, p in params], dtype=np.float64)
    queue = [(k, draw(k)) for k in range(len(params))]
    sites, seen = [], set()
    while queue or sum(not s.structural_zero for s in sites) < samples:
        if queue:
            k, idx = queue.pop(0)
        else:
            k = int(rng.choice(len(params), p=sizes / sizes.sum()))
            idx = draw(k)
        if (k, idx) in seen:
            if len(seen) >= sizes.sum():
                break
            continue
        seen.add((k, idx))
        name, p = params[k]
        a = float(p.grad[idx]) if p.grad is not None else 0.0
        num, used, smooth = _projected_difference(output, proj, p.data, idx, step, base)
        err = float(relative_error(a, num)) if smooth else float("inf")
        sites.append(Site(name, idx, a, num, err, used, smooth and abs(a) <= ZERO_GRAD))
    freeze_batch_stats(model, False)
    return NetworkAudit(sites, time.perf_counter() - t0)

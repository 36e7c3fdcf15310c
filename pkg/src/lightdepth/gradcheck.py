"""Finite-difference verification of every differentiable op.

Each check draws seeded random 64-bit inputs, contracts the op output with a
random weight tensor to get a scalar, and compares reverse-mode gradients
with central differences using step ``h = 1e-4 * max(1, |x|)``.
Elements whose gradient magnitude is below 1e-8 are compared absolutely.
Inputs for ops with kinks (relu, abs, max-pool) are drawn away from the
kink so the finite difference is well defined. Through the whole network
that cannot be arranged up front, so each probe records which side of every
kink the activations fall on; a probe whose +h or -h evaluation lands on a
different side is retried with a smaller step, and left out (and counted) if
it still straddles one.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import losses, network, ops
from .autodiff import Tensor, backward, no_grad

REL_TOL = 1e-4
ABS_FLOOR = 1e-8
STEP = 1e-4
SHRINK_STEPS = 2  # retries at h/10, h/100 when a probe straddles a kink
MAX_SKIPPED_FRACTION = 0.01


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    max_small_abs_error: float
    passed: bool
    probes: int = 0  # network checks only: coordinates compared
    shrunk: int = 0  # ... of which needed a smaller step to stay off kinks
    skipped: int = 0  # coordinates left out because every step straddled a kink

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        text = (f"{self.name:<22} n={self.instances:<4} max_rel={self.max_rel_error:.3e} "
                f"small_abs={self.max_small_abs_error:.1e}  {status}")
        if self.probes:
            text += f"  probes={self.probes} shrunk={self.shrunk} skipped={self.skipped}"
        return text


def compare(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, float]:
    """(max relative error over non-tiny elements, max abs error over tiny ones)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    err = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    big = scale >= ABS_FLOOR
    rel = float((err[big] / scale[big]).max()) if big.any() else 0.0
    small = float(err[~big].max()) if (~big).any() else 0.0
    return rel, small


def fd_check(fn: Callable[..., Tensor], inputs: list[np.ndarray],
             rng: np.random.Generator) -> tuple[float, float]:
    """Check all inputs of ``fn`` at ``inputs``; returns ``compare`` output."""
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    weights = rng.standard_normal(out.shape) if out.ndim else np.array(1.0)
    backward(ops.sum_(ops.mul(out, Tensor(weights))) if out.ndim else out)

    def scalar(arrays):
        with no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights))

    worst_rel = worst_small = 0.0
    arrays = [x.copy() for x in inputs]
    for k, t in enumerate(tensors):
        numeric = np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = STEP * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = scalar(arrays)
            flat[i] = orig - h
            fm = scalar(arrays)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        analytic = t.grad if t.grad is not None else np.zeros_like(numeric)
        rel, small = compare(analytic, numeric)
        worst_rel, worst_small = max(worst_rel, rel), max(worst_small, small)
    return worst_rel, worst_small


# ------------------------------------------------------------ input samplers
def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin) + (x == 0) * margin


def _distinct(rng, shape, spacing=1e-2):
    n = int(np.prod(shape))
    return ((rng.permutation(n) - n / 2) * spacing).reshape(shape) + rng.uniform(0, spacing / 4)


def _img(rng, n=(1, 3), c=(1, 4), hw=(3, 7)):
    return (int(rng.integers(*n)), int(rng.integers(*c)),
            int(rng.integers(*hw)), int(rng.integers(*hw)))


def _case_conv(rng):
    n, cin, h, w = _img(rng, hw=(4, 7))
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    cout = int(rng.integers(1, 4))
    x, wt = rng.standard_normal((n, cin, h, w)), rng.standard_normal((cout, cin, k, k))
    if rng.random() < 0.5:
        return (lambda a, b, c: ops.conv2d(a, b, c, stride, pad)), [x, wt, rng.standard_normal(cout)]
    return (lambda a, b: ops.conv2d(a, b, None, stride, pad)), [x, wt]


def _case_batch_norm(rng):
    n, c, h, w = 2, int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    args = [rng.standard_normal((n, c, h, w)) * 2 + 1, rng.standard_normal(c), rng.standard_normal(c)]
    if rng.random() < 0.5:
        return (lambda x, g, b: ops.batch_norm(x, g, b, ops.RunningStats(c, np.float64), "train")), args
    stats = ops.RunningStats(c, np.float64)
    stats.update(rng.standard_normal(c), rng.uniform(0.5, 2.0, c), 1.0)
    return (lambda x, g, b: ops.batch_norm(x, g, b, stats, "eval")), args


def _pool_geometry(rng):
    n, c, h, w = _img(rng, hw=(4, 8))
    k = int(rng.integers(2, 4))
    return (n, c, h, w), k, int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))


def _case_avg_pool(rng):
    shape, k, s, p = _pool_geometry(rng)
    return (lambda x: ops.avg_pool2d(x, k, s, p)), [rng.standard_normal(shape)]


def _case_max_pool(rng):
    shape, k, s, p = _pool_geometry(rng)
    return (lambda x: ops.max_pool2d(x, k, s, p)), [_distinct(rng, shape)]


def _case_slice(rng):
    shape = _img(rng, hw=(3, 7))
    h, w = shape[2:]
    i0, j0 = int(rng.integers(0, h - 1)), int(rng.integers(0, w - 1))
    idx = (slice(None), slice(None), slice(i0, None), slice(None, w - j0))
    return (lambda x: ops.slice_(x, idx)), [rng.standard_normal(shape)]


def _binary(op, second=None):
    def case(rng):
        shape = _img(rng)
        b = second(rng, shape) if second else rng.standard_normal(shape)
        return op, [rng.standard_normal(shape), b]
    return case


def _unary(op, sampler=None):
    def case(rng):
        shape = _img(rng)
        return op, [sampler(rng, shape) if sampler else rng.standard_normal(shape)]
    return case


def _case_concat(rng):
    n, ca, h, w = _img(rng)
    cb = int(rng.integers(1, 4))
    return ops.concat_channels, [rng.standard_normal((n, ca, h, w)),
                                 rng.standard_normal((n, cb, h, w))]


def _case_reshape(rng):
    shape = _img(rng)
    return (lambda x: ops.reshape(x, (shape[0], -1))), [rng.standard_normal(shape)]


def _kink_free_pair(rng, shape, margin=1e-2):
    """Target/prediction pair whose residual and residual differences avoid zero."""
    while True:
        y = rng.uniform(1.0, 10.0, shape)
        yhat = rng.uniform(1.0, 10.0, shape)
        d = y - yhat
        if (np.abs(d).min() > margin and np.abs(np.diff(d, axis=-1)).min() > margin
                and np.abs(np.diff(d, axis=-2)).min() > margin):
            return y, yhat


def _case_composite(rng):
    y, yhat = _kink_free_pair(rng, (1, 1, 8, 8))
    target = Tensor(y)
    return (lambda p: losses.composite_loss(target, p).total), [yhat]


OP_CASES: dict[str, Callable] = {
    "add": _binary(ops.add),
    "add_scalar": _unary(lambda x: ops.add(x, 0.7)),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "mul_scalar": _unary(lambda x: ops.mul(x, -1.3)),
    "div": _binary(ops.div, lambda rng, s: _away_from_zero(rng, s, 0.5)),
    "abs": _unary(ops.absolute, _away_from_zero),
    "sum": _unary(ops.sum_),
    "mean": _unary(ops.mean),
    "slice": _case_slice,
    "reshape": _case_reshape,
    "relu": _unary(ops.relu, _away_from_zero),
    "softplus": _unary(ops.softplus, lambda rng, s: 3 * rng.standard_normal(s)),
    "conv2d": _case_conv,
    "batch_norm": _case_batch_norm,
    "avg_pool2d": _case_avg_pool,
    "max_pool2d": _case_max_pool,
    "bilinear_upsample2x": _unary(ops.bilinear_upsample2x),
    "concat_channels": _case_concat,
    "composite_loss": _case_composite,
}


def check_op(name: str, instances: int = 100, seed: int = 0) -> CheckResult:
    case = OP_CASES[name]
    worst_rel = worst_small = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, *name.encode()])
        fn, inputs = case(rng)
        rel, small = fd_check(fn, inputs, rng)
        worst_rel, worst_small = max(worst_rel, rel), max(worst_small, small)
    ok = worst_rel <= REL_TOL and worst_small <= ABS_FLOOR
    return CheckResult(name, instances, worst_rel, worst_small, ok)


# -------------------------------------------------------- network end to end
def network_problem(seed: int, preset: str = "toy", size: int = 16):
    """64-bit toy network, random image and kink-free random target."""
    cfg = network.preset(preset, seed=seed)
    net = network.build(cfg, dtype=np.float64)
    rng = np.random.default_rng([seed, 0x6E6574])
    image = Tensor(rng.uniform(0, 1, (1, 3, size, size)))
    h = size // 2 if cfg.output_scale == "half" else size
    target = Tensor(rng.uniform(1.0, 10.0, (1, 1, h, h)))

    def loss() -> Tensor:
        return losses.composite_loss(target, net.forward(image, "train")).total

    return net, loss


@dataclass
class NetworkCheck:
    max_rel_error: float
    max_small_abs_error: float
    probes: int
    shrunk: int
    skipped: int


_KINKED = (ops.ReLU, ops.Abs, ops.MaxPool2d)


@contextlib.contextmanager
def _kink_sides(store: list[np.ndarray]) -> Iterator[None]:
    """Record, for every kinked op evaluated, which branch each element took."""
    saved = {cls: cls.forward for cls in _KINKED}

    def recorder(fwd):
        def forward(self, x, *args, **kwargs):
            out = fwd(self, x, *args, **kwargs)
            store.append(self.arg.copy() if isinstance(self, ops.MaxPool2d) else x > 0)
            return out
        return forward

    for cls, fwd in saved.items():
        cls.forward = recorder(fwd)
    try:
        yield
    finally:
        for cls, fwd in saved.items():
            cls.forward = fwd


def _same_sides(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_network(seed: int = 0, coords_per_tensor: int | None = None,
                  preset: str = "toy", size: int = 16) -> NetworkCheck:
    """Compare parameter gradients of the composite loss through the network.

    ``coords_per_tensor=None`` checks every parameter element; otherwise that
    many randomly chosen elements per parameter tensor.
    """
    net, loss = network_problem(seed, preset, size)
    net.zero_grad()
    loss().backward()
    rng = np.random.default_rng([seed, 0x636F6F7264])

    def probe() -> tuple[float, list[np.ndarray]]:
        sides: list[np.ndarray] = []
        with no_grad(), _kink_sides(sides):
            value = loss().item()
        return value, sides

    _, base = probe()
    worst_rel = worst_small = 0.0
    probes = shrunk = skipped = 0
    for _, p in net.named_parameters():
        flat = p.data.reshape(-1)
        if coords_per_tensor is None:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False)
        analytic, numeric = [], []
        for i in idx:
            orig = flat[i]
            h = STEP * max(1.0, abs(orig))
            for attempt in range(SHRINK_STEPS + 1):
                flat[i] = orig + h
                fp, side_p = probe()
                flat[i] = orig - h
                fm, side_m = probe()
                flat[i] = orig
                if _same_sides(side_p, base) and _same_sides(side_m, base):
                    break
                h /= 10
            else:
                skipped += 1
                continue
            shrunk += attempt > 0
            analytic.append(p.grad.reshape(-1)[i])
            numeric.append((fp - fm) / (2 * h))
        probes += len(numeric)
        if numeric:
            rel, small = compare(np.array(analytic), np.array(numeric))
            worst_rel, worst_small = max(worst_rel, rel), max(worst_small, small)
    return NetworkCheck(worst_rel, worst_small, probes, shrunk, skipped)


def check_network_suite(instances: int = 100, seed: int = 0, coords_per_tensor: int = 2,
                        exhaustive: bool = False) -> CheckResult:
    """``instances`` sampled network problems, plus one exhaustive one if asked."""
    checks = [check_network(seed, None)] if exhaustive else []
    checks += [check_network(seed + 1 + i, coords_per_tensor) for i in range(instances)]
    worst_rel = max(c.max_rel_error for c in checks)
    worst_small = max(c.max_small_abs_error for c in checks)
    probes = sum(c.probes for c in checks)
    skipped = sum(c.skipped for c in checks)
    # a kink-straddling probe is excluded, but too many would mean the check says little
    ok = (worst_rel <= REL_TOL and worst_small <= ABS_FLOOR
          and skipped <= MAX_SKIPPED_FRACTION * (probes + skipped))
    return CheckResult("toy_network_loss", len(checks), worst_rel, worst_small, ok,
                       probes=probes, shrunk=sum(c.shrunk for c in checks), skipped=skipped)


# -------------------------------------------------------------- harness hook
@contextlib.contextmanager
def corrupted(op_name: str, factor: float = 1.01) -> Iterator[None]:
    """Temporarily scale the backward pass of one op, to prove the suite bites."""
    cls = ops.DIFFERENTIABLE_OPS[op_name]
    original = cls.backward

    def bad_backward(self, g):
        return tuple(None if x is None else x * factor for x in original(self, g))

    cls.backward = bad_backward
    try:
        yield
    finally:
        cls.backward = original


def run_suite(instances: int = 100, seed: int = 0, network_instances: int = 100,
              exhaustive_network: bool = False,
              report: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    for name in OP_CASES:
        r = check_op(name, instances, seed)
        results.append(r)
        if report:
            report(r.line())
    r = check_network_suite(network_instances, seed, exhaustive=exhaustive_network)
    results.append(r)
    if report:
        report(r.line())
    return results

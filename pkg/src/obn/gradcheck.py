"""Central finite-difference checks of analytic gradients (float64 only)."""
import copy
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisBlockGroup, BasisConv, FactorizedConv, FilterBasis, ortho_penalty, ortho_penalty_grad
from .models import build, spec_from_name
from .nn import (BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d, Module, PadShortcut, ReLU, ResidualAdd,
                 SoftmaxCrossEntropy, Tape)


@dataclass
class GradcheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)  # name -> max relative error

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def failures(self):
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}

    @property
    def worst(self):
        return max(self.errors.values()) if self.errors else 0.0

    def lines(self):
        for name, err in self.errors.items():
            yield f"{'ok  ' if err < self.tolerance else 'FAIL'} {name:50s} {err:.3e}"


def rel_error(analytic, numeric):
    """Elementwise ``|a - n| / max(1, |n|)``, maximized."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))) if a.size else 0.0


def numeric_grad(f, x, h=1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_function(f, grad, x, h=1e-5):
    """Max relative error between ``grad(x)`` and central differences of ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    num = numeric_grad(lambda: f(x), x, h)
    return rel_error(grad(x), num)


class LabeledLoss(Module):
    """Adapter turning ``criterion(logits, labels)`` into a one-input layer."""

    def __init__(self, criterion, labels):
        super().__init__()
        self.criterion = criterion
        self.labels = labels

    def forward(self, x, tape=None):
        return np.asarray(self.criterion.forward(x, self.labels, tape))

    def backward(self, grad, tape):
        return self.criterion.backward(grad, tape)


def _sample(size, limit, rng):
    if limit is None or size <= limit:
        return None
    return rng.choice(size, limit, replace=False)


def gradcheck(module, x, tolerance=1e-6, h=1e-5, max_checks=None, seed=0, check_input=True):
    """Compare analytic and central-difference gradients of a module.

    The scalar checked is ``sum(module(x) * P)`` for a fixed random projection
    ``P``. Batch-norm running statistics are restored afterwards. With
    ``max_checks`` only that many randomly chosen entries per tensor are
    differenced.
    """
    if x.dtype != np.float64 or any(p.data.dtype != np.float64 for p in module.parameters()):
        raise TypeError("gradcheck needs float64 inputs and parameters")
    rng = np.random.default_rng(seed)
    saved = [(o, k, getattr(o, k).copy()) for _, o, k in module.named_buffers()]
    x = x.copy()
    out = module.forward(x)
    proj = rng.standard_normal(np.shape(out))

    def loss():
        return float(np.sum(module.forward(x) * proj))

    for p in module.parameters():
        p.zero_grad()
    tape = Tape()
    out = module.forward(x, tape)
    gx = module.backward(proj.reshape(np.shape(out)), tape)
    report = GradcheckReport(tolerance)
    if len(tape):
        report.errors["<tape not empty after backward>"] = float("inf")
    analytic = {name: p.grad.copy() for name, p in module.named_parameters()}
    if check_input:
        idx = _sample(x.size, max_checks, rng)
        num = numeric_grad(loss, x, h, idx)
        a = gx if idx is None else gx.reshape(-1)[idx]
        n = num if idx is None else num.reshape(-1)[idx]
        report.errors["input"] = rel_error(a, n)
    for name, p in module.named_parameters():
        idx = _sample(p.data.size, max_checks, rng)
        num = numeric_grad(loss, p.data, h, idx)
        a = analytic[name] if idx is None else analytic[name].reshape(-1)[idx]
        n = num if idx is None else num.reshape(-1)[idx]
        report.errors[name] = rel_error(a, n)
    for owner, key, value in saved:
        getattr(owner, key)[...] = value
    return report


class CorruptedLinear(Linear):
    """Negative control: a linear layer whose weight gradient is off by 10%."""

    def backward(self, grad, tape):
        gx = super().backward(grad, tape)
        self.weight.grad *= 1.1
        return gx


# --- check suites used by ``obn gradcheck`` -----------------------------------------------------


class BasisHolder(Module):
    """Registers a basis next to a unit that only references it."""

    def __init__(self, basis, unit):
        super().__init__()
        self.basis = basis
        self.unit = unit

    def forward(self, x, tape=None):
        return self.unit.forward(x, tape)

    def backward(self, grad, tape):
        return self.unit.backward(grad, tape)


class _AddAdapter(Module):
    """``x + 2x`` through :class:`ResidualAdd`, so both branch gradients are exercised."""

    def __init__(self):
        super().__init__()
        self.add = ResidualAdd()

    def forward(self, x, tape=None):
        return self.add.forward(x, 2 * x, tape)

    def backward(self, grad, tape):
        ga, gb = self.add.backward(grad, tape)
        return ga + 2 * gb


def layer_cases(rng, corrupt=False):
    """``[(name, module, input)]`` covering every layer type in float64."""
    f8 = np.float64
    x4 = rng.standard_normal((2, 3, 6, 6))
    cases = [
        ("Conv2d k3", Conv2d(3, 4, 3, rng=rng, dtype=f8), x4),
        ("Conv2d k3 stride2", Conv2d(3, 4, 3, 2, rng=rng, dtype=f8), x4),
        ("Conv2d k1", Conv2d(3, 5, 1, rng=rng, dtype=f8), x4),
        ("ReLU", ReLU(), x4),
        ("BatchNorm2d", BatchNorm2d(3, f8), x4),
        ("GlobalAvgPool", GlobalAvgPool(), x4),
        ("MaxPool2d", MaxPool2d(), x4),
        ("Linear", Linear(7, 4, rng=rng, dtype=f8), rng.standard_normal((3, 7))),
        ("PadShortcut", PadShortcut(3, 6, 2), x4),
        ("ResidualAdd", _AddAdapter(), x4),
        ("SoftmaxCrossEntropy", LabeledLoss(SoftmaxCrossEntropy(), np.array([0, 3, 1])),
         rng.standard_normal((3, 4))),
    ]
    basis = FilterBasis(3, 3, 2, 1, 2, rng, f8)
    cases.append(("BasisConv", BasisHolder(basis, BasisConv(basis, 1)), x4))
    cases.append(("FactorizedConv", BasisHolder(basis, FactorizedConv(basis, 0, 4, 1, True, rng, f8)), x4))
    if corrupt:
        cases.append(("CorruptedLinear (negative control)", CorruptedLinear(7, 4, rng=rng, dtype=f8),
                      rng.standard_normal((3, 7))))
    return cases


def penalty_errors(rng):
    """Finite-difference errors of the orthogonality penalty gradient."""
    out = {}
    w = rng.standard_normal((18, 5))
    out["ortho_penalty(W)"] = check_function(lambda m: ortho_penalty([m]), ortho_penalty_grad, w)
    basis = FilterBasis(3, 2, 3, 2, 3, rng, np.float64, init="gaussian")
    for p in basis.parameters():
        p.zero_grad()
    basis.add_penalty_grad(1.0)
    for name, p in basis.named_parameters():
        num = numeric_grad(basis.penalty, p.data)
        out[f"FilterBasis.penalty / {name}"] = rel_error(p.grad, num)
    return out


def accumulation_error(seed=0, channels=4, n_blocks=2, s=3, u=1, dual=False):
    """Max abs difference between the shared-basis gradient and the sum over independent copies.

    Every conv that uses the basis is given its own copy (same values), the
    same loss is backpropagated, and the copies' shared gradients are summed.
    """
    rng = np.random.default_rng(seed)
    group = BasisBlockGroup(channels, n_blocks, s, u, 3, dual, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, channels, 5, 5))
    proj = rng.standard_normal(x.shape)
    split = copy.deepcopy(group)
    copies = []
    for blk in split.blocks:
        for unit in (blk.conv1, blk.conv2):
            c = copy.deepcopy(unit.conv_basis.basis)
            object.__setattr__(unit.conv_basis, "basis", c)
            copies.append(c)
    for net in (group, split):
        net.zero_grad()
        for c in copies:
            c.zero_grad()
        tape = Tape()
        net.forward(x, tape)
        net.backward(proj, tape)
    err = 0.0
    for orig in group.bases:
        mine = [c for c in copies if np.array_equal(c.shared.data, orig.shared.data)]
        total = sum(c.shared.grad for c in mine)
        err = max(err, float(np.max(np.abs(total - orig.shared.grad))))
    return err


def run_scope(scope="layer", seed=0, corrupt=False, tolerance=1e-6):
    """One :class:`GradcheckReport` for ``layer``, ``block`` or ``network`` scope."""
    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance)
    if scope == "layer":
        for name, mod, x in layer_cases(rng, corrupt):
            for key, err in gradcheck(mod, x, tolerance).errors.items():
                report.errors[f"{name} / {key}"] = err
        report.errors.update(penalty_errors(rng))
    elif scope == "block":
        for dual in (False, True):
            tag = "dual" if dual else "single"
            group = BasisBlockGroup(4, 2, 3, 1, 3, dual, rng=rng, dtype=np.float64)
            x = rng.standard_normal((2, 4, 5, 5))
            for key, err in gradcheck(group, x, tolerance).errors.items():
                report.errors[f"2-block group ({tag}) / {key}"] = err
            report.errors[f"accumulation identity ({tag})"] = accumulation_error(seed, dual=dual)
    elif scope == "network":
        net = build(spec_from_name("ResNet8-S4U1‡", input_size=8), seed, np.float64)
        x = rng.standard_normal((4, 3, 8, 8))
        labels = np.array([0, 1, 2, 3])
        head = _NetworkLoss(net, labels)
        for key, err in gradcheck(head, x, tolerance, max_checks=12, seed=seed).errors.items():
            report.errors[f"ResNet8-S4U1‡ / {key}"] = err
    else:
        raise ValueError(f"unknown scope {scope!r}")
    if corrupt and scope != "layer":
        for name, mod, x in layer_cases(rng, True)[-1:]:
            report.errors[f"{name} / weight"] = gradcheck(mod, x, tolerance).errors["weight"]
    return report


class _NetworkLoss(Module):
    def __init__(self, net, labels):
        super().__init__()
        self.net = net
        self.head = LabeledLoss(net.criterion, labels)

    def forward(self, x, tape=None):
        return self.head.forward(self.net.forward(x, tape), tape)

    def backward(self, grad, tape):
        return self.net.backward(self.head.backward(grad, tape), tape)

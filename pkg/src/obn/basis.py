"""Factorized convolution over a recursively shared, orthonormal filter basis.

A block's filters are linear combinations of basis elements,
``W_t = sum_r alpha[t, r] * basis[r]``, so a k x k convolution with T
outputs is computed as a k x k convolution onto R basis maps followed by a
1 x 1 convolution with the coefficients. The basis elements are split into
``s`` elements shared by every block of a group and ``u`` elements owned by
each block; coefficients are never shared.

In matrix form a basis is ``k*k*S x R`` with one element per column (rows in
im2col order). Orthogonality regularization penalizes
``||W^T W - I||_F^2`` so that repeated application of the shared basis
neither amplifies nor attenuates signals.
"""
import numpy as np

from .errors import DimensionError, RankError
from .nn import BatchNorm2d, Conv2d, Module, Parameter, ResidualAdd, ReLU, conv2d_backward, conv2d_forward


def check_rank(k, channels, rank):
    if rank < 1 or rank > k * k * channels:
        raise RankError(f"basis rank {rank} must lie in [1, k*k*S = {k * k * channels}]")


def as_matrix(elements):
    """``R x S x k x k`` elements -> ``k*k*S x R`` matrix with elements as columns."""
    return elements.reshape(elements.shape[0], -1).T


def as_elements(matrix, channels, k):
    return np.ascontiguousarray(matrix.T).reshape(matrix.shape[1], channels, k, k)


def orthogonal_columns(rng, rows, cols, against=None):
    """Orthonormal ``rows x cols`` matrix from QR of a Gaussian draw.

    With ``against`` given, the new columns are also orthogonal to its columns.
    """
    g = rng.standard_normal((rows, cols))
    if against is not None:
        g -= against @ (against.T @ g)
        g -= against @ (against.T @ g)
    q, r = np.linalg.qr(g)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def orthogonal_init(k, channels, rank, seed, dtype=np.float64):
    """Basis elements ``R x S x k x k`` whose reshaped columns are orthonormal."""
    check_rank(k, channels, rank)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q = orthogonal_columns(rng, k * k * channels, rank)
    return as_elements(q, channels, k).astype(dtype)


class FilterBasis(Module):
    """Shared elements plus per-block unshared elements of one group's basis.

    ``shared`` is ``s x S x k x k``; block ``b`` owns ``unshared_b``
    (``u x S x k x k``). The effective basis of block ``b`` is the shared
    elements followed by that block's unshared ones, rank ``R = s + u``.
    """

    def __init__(self, k, channels, s, u, n_blocks, rng=None, dtype=np.float32, init="orthogonal"):
        super().__init__()
        if s < 1 or u < 0:
            raise RankError(f"need s >= 1 and u >= 0, got s={s}, u={u}")
        check_rank(k, channels, s + u)
        self.k, self.channels, self.s, self.u, self.n_blocks = k, channels, s, u, n_blocks
        rng = rng if rng is not None else np.random.default_rng(0)
        dim = k * k * channels
        if init == "orthogonal":
            q = orthogonal_columns(rng, dim, s)
            self.shared = Parameter(as_elements(q, channels, k).astype(dtype))
            blocks = [orthogonal_columns(rng, dim, u, against=q) for _ in range(n_blocks)] if u else []
        elif init == "gaussian":
            scale = np.sqrt(2.0 / dim)
            self.shared = Parameter((rng.standard_normal((s, channels, k, k)) * scale).astype(dtype))
            blocks = [rng.standard_normal((dim, u)) * scale for _ in range(n_blocks)] if u else []
        else:
            raise ValueError(f"unknown basis init {init!r}")
        self.unshared = []
        for b, m in enumerate(blocks):
            p = Parameter(as_elements(m, channels, k).astype(dtype))
            setattr(self, f"unshared_{b}", p)
            self.unshared.append(p)

    @property
    def rank(self):
        return self.s + self.u

    def elements(self, block):
        if not 0 <= block < self.n_blocks:
            raise IndexError(f"block {block} out of range for {self.n_blocks} blocks")
        if not self.u:
            return self.shared.data
        return np.concatenate([self.shared.data, self.unshared[block].data])

    def matrix(self, block=0):
        return as_matrix(self.elements(block))

    def effective_matrices(self):
        """The matrices the regularizer sees: shared-only when u = 0, else one per block."""
        if not self.u:
            return [as_matrix(self.shared.data)]
        return [self.matrix(b) for b in range(self.n_blocks)]

    def penalty(self):
        mats = self.effective_matrices()
        return ortho_penalty(mats) / len(mats)

    def deviation(self):
        """Frobenius deviation from orthonormality (root of the per-basis penalty)."""
        return float(np.sqrt(self.penalty()))

    def add_penalty_grad(self, lam):
        """Accumulate ``lam * d(penalty)/d(elements)`` into the parameter gradients."""
        mats = self.effective_matrices()
        scale = lam / len(mats)
        s = self.s
        for b, m in enumerate(mats):
            g = as_elements(ortho_penalty_grad(m), self.channels, self.k) * scale
            self.shared.grad += g[:s].astype(self.shared.grad.dtype)
            if self.u:
                self.unshared[b].grad += g[s:].astype(self.unshared[b].grad.dtype)


def compose_filters(basis, coeffs, block):
    """Full ``T x S x k x k`` filters of one block: ``W_t = sum_r coeffs[t, r] * element_r``.

    ``coeffs`` is the block's ``T x R x 1 x 1`` pointwise weight (or ``T x R``).
    """
    alpha = coeffs.reshape(coeffs.shape[0], -1)
    elems = basis.elements(block)
    if alpha.shape[1] != elems.shape[0]:
        raise DimensionError(f"coefficients have rank {alpha.shape[1]}, basis has {elems.shape[0]}")
    return np.tensordot(alpha, elems, axes=1)


def ortho_penalty(matrices):
    """Sum of squared Frobenius deviations ``||W^T W - I||_F^2`` over basis matrices."""
    total = 0.0
    for w in matrices:
        rows, r = w.shape
        if r > rows:
            raise RankError(f"basis matrix {w.shape} has more columns than rows")
        d = w.T @ w - np.eye(r, dtype=w.dtype)
        total += float(np.sum(d * d))
    return total


def ortho_penalty_grad(w):
    """Gradient of ``||W^T W - I||_F^2`` with respect to W: ``4 W (W^T W - I)``."""
    rows, r = w.shape
    if r > rows:
        raise RankError(f"basis matrix {w.shape} has more columns than rows")
    return 4.0 * w @ (w.T @ w - np.eye(r, dtype=w.dtype))


class BasisConv(Module):
    """First factorized stage: convolve with block ``block`` of a :class:`FilterBasis`."""

    def __init__(self, basis, block, stride=1):
        super().__init__()
        # held, not registered: the owning group registers the basis once
        object.__setattr__(self, "basis", basis)
        self.block = block
        self.stride = stride

    def forward(self, x, tape=None):
        w = self.basis.elements(self.block)
        y, cache = conv2d_forward(x, w, self.stride, self.basis.k // 2)
        if tape is not None:
            tape.push(self, cache)
        return y

    def backward(self, grad, tape):
        gx, gw = conv2d_backward(tape.pop(self), grad)
        s = self.basis.s
        self.basis.shared.grad += gw[:s]
        if self.basis.u:
            self.basis.unshared[self.block].grad += gw[s:]
        return gx


class FactorizedConv(Module):
    """Basis convolution, optional batch norm on the R basis maps, then 1x1 coefficients."""

    def __init__(self, basis, block, out_ch, stride=1, basis_bn=True, rng=None, dtype=np.float32):
        super().__init__()
        self.conv_basis = BasisConv(basis, block, stride)
        if isinstance(basis_bn, Module):
            self.bn_basis = basis_bn
        elif basis_bn:
            self.bn_basis = BatchNorm2d(basis.rank, dtype)
        else:
            self.bn_basis = None
        self.coeff = Conv2d(basis.rank, out_ch, 1, rng=rng, dtype=dtype)

    def forward(self, x, tape=None):
        a = self.conv_basis.forward(x, tape)
        if self.bn_basis is not None:
            a = self.bn_basis.forward(a, tape)
        return self.coeff.forward(a, tape)

    def backward(self, grad, tape):
        grad = self.coeff.backward(grad, tape)
        if self.bn_basis is not None:
            grad = self.bn_basis.backward(grad, tape)
        return self.conv_basis.backward(grad, tape)

    def composed_weight(self):
        return compose_filters(self.conv_basis.basis, self.coeff.weight.data, self.conv_basis.block)


class ResidualBlock(Module):
    """Two-conv residual block.

    ``bn_order="post_act"``: conv -> ReLU -> BN for both convs, then add.
    ``bn_order="pre_act"``: conv -> BN -> ReLU, conv -> BN, add, ReLU.
    ``conv1``/``conv2`` may be plain or factorized convolutions.
    """

    def __init__(self, conv1, conv2, channels, shortcut=None, bn_order="post_act", dtype=np.float32):
        super().__init__()
        if bn_order not in ("post_act", "pre_act"):
            raise ValueError(f"bn_order must be post_act or pre_act, got {bn_order!r}")
        self.bn_order = bn_order
        self.conv1, self.conv2 = conv1, conv2
        self.bn1, self.bn2 = BatchNorm2d(channels, dtype), BatchNorm2d(channels, dtype)
        self.relu1, self.relu2 = ReLU(), ReLU()
        self.shortcut = shortcut
        self.add = ResidualAdd()

    def _body(self):
        if self.bn_order == "post_act":
            return [self.conv1, self.relu1, self.bn1, self.conv2, self.relu2, self.bn2]
        return [self.conv1, self.bn1, self.relu1, self.conv2, self.bn2]

    def forward(self, x, tape=None):
        h = x
        for layer in self._body():
            h = layer.forward(h, tape)
        sc = x if self.shortcut is None else self.shortcut.forward(x, tape)
        out = self.add.forward(h, sc, tape)
        if self.bn_order == "pre_act":
            out = self.relu2.forward(out, tape)
        return out

    def backward(self, grad, tape):
        if self.bn_order == "pre_act":
            grad = self.relu2.backward(grad, tape)
        gh, gsc = self.add.backward(grad, tape)
        gx = gsc if self.shortcut is None else self.shortcut.backward(gsc, tape)
        for layer in reversed(self._body()):
            gh = layer.backward(gh, tape)
        return gx + gh


class BasisBlockGroup(Module):
    """A residual group whose non-entry blocks recursively share filter bases.

    ``entry`` (optional) is an ordinary block that changes channel count or
    resolution. The ``N`` following blocks factorize both convolutions over
    ``bases``: one basis for both positions, or with ``dual=True`` one basis per
    conv position. Every factorized conv owns its own unshared elements (a
    basis "slot"), so a single basis has ``2N`` slots and a dual pair ``N`` each.
    """

    def __init__(self, channels, n_blocks, s, u, k=3, dual=False, entry=None, bn_order="post_act",
                 basis_bn=True, share_bn=False, rng=None, dtype=np.float32, basis_init="orthogonal"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.entry = entry
        self.dual = dual
        # one slot of unshared elements per conv that uses a basis
        slots = n_blocks if dual else 2 * n_blocks
        self.basis_a = FilterBasis(k, channels, s, u, slots, rng, dtype, basis_init)
        self.basis_b = FilterBasis(k, channels, s, u, slots, rng, dtype, basis_init) if dual else None
        bases = [self.basis_a] + ([self.basis_b] if dual else [])
        shared_bn = [BatchNorm2d(s + u, dtype) for _ in bases] if (share_bn and basis_bn) else None
        self.blocks = []
        for b in range(n_blocks):
            units = []
            for pos in range(2):
                bi, slot = (pos, b) if dual else (0, 2 * b + pos)
                bn = shared_bn[bi] if shared_bn else basis_bn
                units.append(FactorizedConv(bases[bi], slot, channels, 1, bn, rng, dtype))
            block = ResidualBlock(units[0], units[1], channels, None, bn_order, dtype)
            setattr(self, f"block{b}", block)
            self.blocks.append(block)

    @property
    def bases(self):
        return [self.basis_a] + ([self.basis_b] if self.dual else [])

    def coefficient_sets(self):
        """Per-block, per-position coefficient tensors in block order."""
        return [unit.coeff.weight.data for blk in self.blocks for unit in (blk.conv1, blk.conv2)]

    def forward(self, x, tape=None):
        if self.entry is not None:
            x = self.entry.forward(x, tape)
        for blk in self.blocks:
            x = blk.forward(x, tape)
        return x

    def backward(self, grad, tape):
        for blk in reversed(self.blocks):
            grad = blk.backward(grad, tape)
        if self.entry is not None:
            grad = self.entry.backward(grad, tape)
        return grad


def basis_block_forward(group, block, x, tape=None):
    """Run block ``block`` of a :class:`BasisBlockGroup` on ``x``."""
    if x.shape[1] != group.basis_a.channels:
        raise DimensionError(f"input has {x.shape[1]} channels, basis expects {group.basis_a.channels}")
    return group.blocks[block].forward(x, tape)

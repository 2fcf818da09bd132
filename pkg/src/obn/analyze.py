"""Training instrumentation: gradient flow, coefficient similarity, spectra, orthonormality.

Recorders are trainer hooks. ``on_batch`` runs after backward (and after the
orthogonality-penalty gradient is added) but before weight decay and the
optimizer step; ``on_epoch_end`` runs after the last step of an epoch.
All outputs are CSV.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from .basis import as_matrix
from .errors import ModeError


@dataclass(frozen=True)
class GradFlowRecord:
    iteration: int
    basis_id: str
    max_abs_grad: float
    mean_abs_grad: float


class GradFlowRecorder:
    """Max and mean absolute gradient of every shared basis, every ``every_k`` iterations."""

    def __init__(self, every_k=10):
        self.every_k = every_k
        self.records = []

    def on_batch(self, iteration, network):
        if iteration % self.every_k:
            return
        for basis_id, basis in network.bases():
            g = np.abs(basis.shared.grad)
            self.records.append(GradFlowRecord(iteration, basis_id, float(g.max()), float(g.mean())))

    def trace(self, basis_id=None):
        return [r for r in self.records if basis_id is None or r.basis_id == basis_id]

    def band_ratio(self, basis_id=None, last_fraction=0.5):
        """max / median of max-|grad| over the trailing ``last_fraction`` of records."""
        vals = np.array([r.max_abs_grad for r in self.trace(basis_id)])
        tail = vals[int(len(vals) * (1 - last_fraction)) :]
        return float(tail.max() / np.median(tail))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "basis_id", "max_abs_grad", "mean_abs_grad"])
            for r in self.records:
                w.writerow([r.iteration, r.basis_id, repr(r.max_abs_grad), repr(r.mean_abs_grad)])


def record_grad_flow(trainer, every_k=10):
    """Install a :class:`GradFlowRecorder` on ``trainer`` and return it."""
    rec = GradFlowRecorder(every_k)
    trainer.hooks.append(rec)
    return rec


@dataclass
class SimilarityMatrix:
    matrix: np.ndarray
    labels: list
    zero_norm: list = field(default_factory=list)  # indices of zero vectors (rows/cols set to 0)

    def mean_off_diagonal(self):
        n = len(self.matrix)
        return float((self.matrix.sum() - np.trace(self.matrix)) / (n * (n - 1)))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([""] + list(range(len(self.labels))))
            for i, row in enumerate(self.matrix):
                w.writerow([i] + [repr(float(v)) for v in row])


def cosine_similarity(coeff_sets, labels=None):
    """Absolute cosine similarity ``|<c_i, c_j>| / (|c_i| |c_j|)`` of flattened tensors.

    Zero vectors get 0 in their whole row and column (diagonal included) and
    are listed in ``zero_norm``. Pairs of different sizes cannot be compared
    and are also 0.
    """
    if len(coeff_sets) < 2:
        raise ValueError("need at least two coefficient sets")
    vecs = [np.asarray(c, dtype=np.float64).ravel() for c in coeff_sets]
    norms = [float(np.sqrt(v @ v)) for v in vecs]
    n = len(vecs)
    m = np.zeros((n, n))
    zero = [i for i, nv in enumerate(norms) if nv == 0.0]
    for i in range(n):
        for j in range(i, n):
            if i in zero or j in zero or vecs[i].size != vecs[j].size:
                val = 0.0
            else:
                val = min(abs(float(vecs[i] @ vecs[j])) / (norms[i] * norms[j]), 1.0)
            m[i, j] = m[j, i] = val
        if i not in zero:
            m[i, i] = 1.0
    return SimilarityMatrix(m, list(labels) if labels is not None else list(range(n)), zero)


def network_similarity(network, stages=None):
    """Similarity matrix over the coefficients of the chosen basis groups (default: all)."""
    sets, labels = [], []
    for i, g in network.basis_groups():
        if stages is not None and i not in stages:
            continue
        for b, blk in enumerate(g.blocks):
            for pos, unit in enumerate((blk.conv1, blk.conv2), start=1):
                sets.append(unit.coeff.weight.data)
                labels.append(f"stage{i}.block{b}.conv{pos}")
    return cosine_similarity(sets, labels)


def group_similarities(network):
    """Per-group matrices; coefficient sets only compare within their own group."""
    return {i: cosine_similarity(g.coefficient_sets()) for i, g in network.basis_groups()}


@dataclass
class SpectralReport:
    singular_values: np.ndarray  # descending
    norm_ratios: np.ndarray  # trials x N, entry [p, n-1] = ||(W^T)^n x_p|| / ||x_p||
    eigenvalues: np.ndarray = None  # square case only
    eigenvectors: np.ndarray = None

    def log_ratio(self, n=None):
        col = self.norm_ratios[:, -1 if n is None else n - 1]
        return np.log(col)

    def write_csv(self, path, prefix=""):
        with open(path, "a" if prefix else "w", newline="") as f:
            w = csv.writer(f)
            if not prefix or f.tell() == 0:
                w.writerow(["n", "probe_id", "norm_ratio"])
            for p, row in enumerate(self.norm_ratios):
                for n, v in enumerate(row, start=1):
                    w.writerow([n, f"{prefix}{p}", repr(float(v))])


def spectral_probe(basis, n=20, trials=8, seed=0, mode="product", probes=None):
    """Singular values of a basis and norm growth under repeated application.

    ``basis`` is a ``k*k*S x R`` matrix or ``R x S x k x k`` elements.
    ``mode="product"`` applies ``W^T`` ``n`` times and needs a square matrix;
    ``mode="gram"`` applies ``W^T W`` (analysis then synthesis) and accepts any
    shape; ``mode="values"`` only computes singular values.
    """
    w = np.asarray(basis, dtype=np.float64)
    if w.ndim == 4:
        w = as_matrix(w)
    sv = np.linalg.svd(w, compute_uv=False)
    if mode == "values":
        return SpectralReport(sv, np.zeros((0, n)))
    if mode == "product":
        if w.shape[0] != w.shape[1]:
            raise ModeError(f"product mode needs a square basis, got {w.shape}")
        op = w.T
    elif mode == "gram":
        op = w.T @ w
    else:
        raise ModeError(f"unknown mode {mode!r}")
    if probes is None:
        probes = np.random.default_rng(seed).standard_normal((trials, op.shape[1]))
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    ratios = np.empty((len(probes), n))
    for p, x in enumerate(probes):
        x0 = np.linalg.norm(x)
        v = x.copy()
        for i in range(n):
            v = op @ v
            ratios[p, i] = np.linalg.norm(v) / x0
    eigvals = eigvecs = None
    if op.shape[0] == op.shape[1]:
        eigvals, eigvecs = np.linalg.eig(w if mode == "product" else op)
    return SpectralReport(sv, ratios, eigvals, eigvecs)


def frobenius_deviation(w):
    """``||W^T W - I||_F`` for a ``rows x R`` matrix."""
    w = np.asarray(w, dtype=np.float64)
    d = w.T @ w - np.eye(w.shape[1])
    return float(np.sqrt(np.sum(d * d)))


class DeviationTracker:
    """Per-basis orthonormality deviation at the end of every epoch."""

    def __init__(self):
        self.rows = []  # (epoch, basis_id, frob_dev)

    def snapshot(self, epoch, network):
        for basis_id, basis in network.bases():
            self.rows.append((epoch, basis_id, basis.deviation()))

    def on_epoch_end(self, epoch, network):
        self.snapshot(epoch, network)

    def final(self):
        last = max(r[0] for r in self.rows)
        return {b: d for e, b, d in self.rows if e == last}

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "basis_id", "frob_dev"])
            for e, b, d in self.rows:
                w.writerow([e, b, repr(float(d))])


def ortho_deviation_trace(trainer):
    """Install a :class:`DeviationTracker` on ``trainer`` and record the starting point as epoch -1."""
    tracker = DeviationTracker()
    tracker.snapshot(-1, trainer.network)
    trainer.hooks.append(tracker)
    return tracker

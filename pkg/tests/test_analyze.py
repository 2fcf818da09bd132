import csv

import numpy as np
import pytest

from obn import analyze, data
from obn.basis import FilterBasis, as_elements
from obn.errors import ModeError
from obn.models import build, spec_from_name
from obn.train import TrainConfig, Trainer


def small_trainer(lam=1e-3, seed=0, **cfg):
    net = build(spec_from_name("ResNet14-S4U1", input_size=16), seed)
    return Trainer(net, TrainConfig(ortho_lambda=lam, seed=seed, **cfg))


def header(path):
    with open(path) as f:
        return next(csv.reader(f))


def test_gradflow_records_are_finite_and_non_negative(tmp_path):
    ds = data.synthetic(10, 200, (3, 16, 16), snr=2.0)
    t = small_trainer(batch_size=10)
    rec = analyze.record_grad_flow(t)
    assert rec.every_k == 10
    for _ in range(5):
        t.train_epoch(ds)
    assert t.iteration == 100
    assert len(rec.records) == 10 * len(t.network.bases())
    vals = np.array([[r.max_abs_grad, r.mean_abs_grad] for r in rec.records])
    assert np.all(np.isfinite(vals)) and np.all(vals >= 0)
    assert np.all(vals[:, 0] >= vals[:, 1])
    assert np.isfinite(rec.band_ratio())
    rec.write_csv(tmp_path / "g.csv")
    assert header(tmp_path / "g.csv") == ["iter", "basis_id", "max_abs_grad", "mean_abs_grad"]


def test_gradflow_of_a_solved_batch_is_zero():
    ds = data.synthetic(10, 20, (3, 16, 16))
    t = small_trainer(lam=0.0, augment=False)
    fc = t.network.fc
    fc.weight.data[...] = 0
    fc.bias.data[...] = 0
    fc.bias.data[3] = 1000.0  # every sample already classified with certainty
    y = np.full(20, 3)
    rec = analyze.record_grad_flow(t, every_k=1)
    t.train_step(ds.images, y, 1e-3)
    assert len(rec.records) == len(t.network.bases())
    assert all(r.max_abs_grad == 0.0 for r in rec.records)


def test_band_ratio():
    rec = analyze.GradFlowRecorder(every_k=1)
    rec.records = [analyze.GradFlowRecord(i, "b", v, v) for i, v in enumerate([100, 100, 1, 2, 3, 4])]
    assert rec.band_ratio("b") == pytest.approx(4 / 3)
    assert rec.band_ratio("b", last_fraction=1.0) == pytest.approx(100 / 3.5)


def naive_cosine(a, b):
    a, b = np.ravel(a), np.ravel(b)
    dot = sum(x * y for x, y in zip(a, b))
    na = sum(x * x for x in a) ** 0.5
    nb = sum(y * y for y in b) ** 0.5
    return abs(dot) / (na * nb)


def test_cosine_similarity():
    v = np.array([1.0, 2.0, 3.0])
    m = analyze.cosine_similarity([v, v, -2 * v]).matrix
    np.testing.assert_allclose(m, np.ones((3, 3)))
    m = analyze.cosine_similarity([np.array([1.0, 0]), np.array([0, 5.0])]).matrix
    assert m[0, 1] == 0.0
    rng = np.random.default_rng(0)
    sets = [rng.standard_normal((4, 3, 1, 1)) for _ in range(5)]
    sim = analyze.cosine_similarity(sets)
    for i in range(5):
        for j in range(5):
            assert sim.matrix[i, j] == pytest.approx(naive_cosine(sets[i], sets[j]), rel=1e-14)
    assert np.array_equal(sim.matrix, sim.matrix.T)


def test_cosine_zero_vector_is_flagged():
    sim = analyze.cosine_similarity([np.zeros(3), np.ones(3), np.arange(3.0)])
    assert sim.zero_norm == [0]
    assert np.all(sim.matrix[0] == 0) and np.all(sim.matrix[:, 0] == 0)
    with pytest.raises(ValueError):
        analyze.cosine_similarity([np.ones(3)])


def test_network_similarity_is_symmetric(tmp_path):
    net = build("ResNet20-S8U1")
    sim = analyze.network_similarity(net)
    assert len(sim.labels) == 3 * 2 * 2
    assert np.array_equal(sim.matrix, sim.matrix.T)
    assert np.all(np.diag(sim.matrix) == 1)
    groups = analyze.group_similarities(net)
    assert sorted(groups) == [0, 1, 2] and groups[0].matrix.shape == (4, 4)
    sim.write_csv(tmp_path / "s.csv")
    assert header(tmp_path / "s.csv") == ["", "0", "1", "2"] + [str(i) for i in range(3, 12)]


def test_spectral_orthogonal_is_isometric():
    q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((36, 36)))
    rep = analyze.spectral_probe(q, n=20, trials=8)
    assert rep.norm_ratios.shape == (8, 20)
    assert np.max(np.abs(rep.norm_ratios - 1)) < 1e-9
    np.testing.assert_allclose(rep.singular_values, 1, atol=1e-12)


def scaled_gaussian(radius, dim=36, seed=2):
    rng = np.random.default_rng(seed)
    while True:
        g = rng.standard_normal((dim, dim))
        ev = np.linalg.eigvals(g)
        top = ev[np.argmax(np.abs(ev))]
        if abs(top.imag) < 1e-12:
            return g * (radius / abs(top))


@pytest.mark.parametrize("radius", [1.2, 0.8])
def test_spectral_growth_matches_spectral_radius(radius):
    w = scaled_gaussian(radius)
    ev, vec = np.linalg.eig(w.T)
    probe = np.real(vec[:, np.argmax(np.abs(ev))])
    rep = analyze.spectral_probe(w, n=20, probes=probe[None])
    expected = 20 * np.log(radius)
    assert abs(rep.log_ratio()[0] - expected) <= 0.2 * abs(expected)
    assert abs(rep.log_ratio()[0]) >= 0.5


def test_spectral_diagonal_decay_and_modes():
    rep = analyze.spectral_probe(0.5 * np.eye(9), n=20)
    np.testing.assert_allclose(rep.norm_ratios[:, -1], 0.5**20, rtol=1e-12)
    with pytest.raises(ModeError):
        analyze.spectral_probe(np.ones((9, 4)), mode="product")
    with pytest.raises(ModeError):
        analyze.spectral_probe(np.eye(3), mode="nope")
    b = FilterBasis(3, 4, 6, 2, 2, np.random.default_rng(3), np.float64)
    rep = analyze.spectral_probe(b.elements(0), mode="gram")
    assert rep.singular_values.shape == (8,)
    np.testing.assert_allclose(rep.norm_ratios, 1, atol=1e-9)
    assert analyze.spectral_probe(b.matrix(0), mode="values").singular_values.shape == (8,)


def test_deviation_of_identity_columns_is_zero():
    assert analyze.frobenius_deviation(np.eye(9)[:, :4]) == 0.0
    b = FilterBasis(3, 1, 4, 0, 1, dtype=np.float64)
    b.shared.data[...] = as_elements(np.eye(9)[:, :4], 1, 3)
    assert b.deviation() == 0.0


def test_deviation_trace_starts_orthonormal(tmp_path):
    ds = data.synthetic(10, 40, (3, 16, 16))
    t = small_trainer(batch_size=20)
    tr = analyze.ortho_deviation_trace(t)
    first = [d for e, _, d in tr.rows if e == -1]
    assert len(first) == 3 and max(first) <= 1e-5
    t.train_epoch(ds)
    assert sorted(tr.final()) == ["stage0.basis_a", "stage1.basis_a", "stage2.basis_a"]
    tr.write_csv(tmp_path / "d.csv")
    assert header(tmp_path / "d.csv") == ["epoch", "basis_id", "frob_dev"]


@pytest.mark.slow
def test_regularized_run_ends_closer_to_orthonormal():
    ds = data.synthetic(10, 1000, (3, 16, 16), seed=0, snr=3.0)
    finals = {}
    for lam in (1e-3, 0.0):
        net = build(spec_from_name("ResNet20-S8U1", input_size=16), 0)
        t = Trainer(net, TrainConfig(epochs=10, batch_size=50, ortho_lambda=lam))
        tr = analyze.ortho_deviation_trace(t)
        for _ in range(5):
            t.train_epoch(ds)
        finals[lam] = np.mean(list(tr.final().values()))
    assert finals[1e-3] < finals[0.0]

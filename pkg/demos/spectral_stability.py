"""Repeatedly applying a shared basis: orthogonal keeps norms, anything else drifts geometrically.

Run: python3 demos/spectral_stability.py
"""
import numpy as np

from obn.analyze import spectral_probe

rng = np.random.default_rng(0)
q, _ = np.linalg.qr(rng.standard_normal((36, 36)))


def scaled(radius):
    g = rng.standard_normal((36, 36))
    return g * radius / np.max(np.abs(np.linalg.eigvals(g)))


for label, w in [("orthogonal", q), ("radius 1.2", scaled(1.2)), ("radius 0.8", scaled(0.8))]:
    rep = spectral_probe(w, n=20, trials=8, seed=1)
    r = np.median(rep.norm_ratios, axis=0)
    print(f"{label:11s} ||W^n x|| / ||x|| at n=1,5,10,20: " + "  ".join(f"{r[n - 1]:10.4g}" for n in (1, 5, 10, 20)))

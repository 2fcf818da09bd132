"""Why sharing a basis saves parameters, and that the factorized conv is exact.

Run: python3 demos/factorization_and_counts.py
"""
import numpy as np

from obn.basis import FactorizedConv, FilterBasis, compose_filters
from obn.models import count, spec_from_name
from obn.nn import conv2d_forward

rng = np.random.default_rng(0)

# A 3x3 conv over 16 channels, expressed through 8 shared + 1 private basis filters.
basis = FilterBasis(3, 16, 8, 1, 2, rng, np.float64)
unit = FactorizedConv(basis, 0, 16, 1, basis_bn=False, rng=rng, dtype=np.float64)
x = rng.standard_normal((2, 16, 8, 8))
two_stage = unit.forward(x)
full, _ = conv2d_forward(x, compose_filters(basis, unit.coeff.weight.data, 0), 1, 1)
print(f"two-stage vs composed filters: max abs diff {np.max(np.abs(two_stage - full)):.2e}")
print(f"basis matrix {basis.matrix(0).shape}, ||W^T W - I||_F = {basis.deviation():.2e} at orthogonal init\n")

print(f"{'model':22s} {'params':>10s} {'MFLOPs':>9s}")
for name in ("ResNet32", "ResNet32-S16U1", "ResNet32-S16U1‡", "ResNet56", "ResNet56-S16U1", "ResNet56-S16U1‡"):
    r = count(spec_from_name(name))
    print(f"{name:22s} {r.params:10d} {r.flops / 1e6:9.2f}")

# Sharing trades parameters for compute: every conv runs the basis then a 1x1 mix.
print("\nper-layer breakdown of ResNet20-S8U1 (first rows):")
print("\n".join(count(spec_from_name("ResNet20-S8U1")).table().splitlines()[:8]))

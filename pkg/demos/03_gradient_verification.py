"""Reverse-mode gradients checked against central finite differences.

First a tiny composed graph, then the full pipeline: one step plus the masked
OD loss on a 3-node toy model, differentiating every parameter array.
"""

import numpy as np

from odcast import autodiff as ad
from odcast import checks

# A small composed graph: f(W) = mean(relu(W X)^2).
rng = np.random.default_rng(0)
w = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="w")
x = ad.constant(rng.normal(size=(4, 2)))
report = ad.fd_check(lambda: ad.mean(ad.square(ad.relu(ad.matmul(w, x)))),
                     [("w", w)], tol=1e-6)
print(f"composed graph: max relative error {report.max_rel_error:.2e} "
      f"over {len(report.rows)} coordinates")

# The full model: every array through one step + loss.
fd = checks.toy_gradient_check(seed=0)
print("\nfull pipeline, per-array worst relative error:")
for array, worst in sorted(fd.by_array().items()):
    print(f"  {array:16s} {worst:.2e}")
print(f"\noverall: {fd.max_rel_error:.2e} across {len(fd.rows)} sampled coordinates "
      f"({'OK' if fd.passed() else 'FAIL'} at 1e-4)")

"""Walk through batch normalization and its modified form on a tiny batch.

Shows the forward outputs, the hand-written backward passes checked against
finite differences, and the algebraic identities the backward gradients obey.

    python3 demos/normalization_gradients.py
"""

import numpy as np

from mabnlab.norm import bn_backward, bn_forward, modified_backward, modified_forward
from mabnlab.tensor import gradcheck

rng = np.random.default_rng(0)
x = rng.normal(2.0, 1.5, size=(2, 3, 4, 4))
dy = rng.normal(size=x.shape)
axes = (0, 2, 3)

print("batch of two samples, three channels, 4x4 maps")
y, cache = bn_forward(x)
print("batch norm output per-channel mean:", np.round(y.mean(axis=axes), 12))
print("batch norm output per-channel var: ", np.round(y.var(axis=axes), 12))

ym, mcache = modified_forward(x)
print("modified norm output second moment:", np.round((ym ** 2).mean(axis=axes), 12))
print("(no centering: the mean survives)  :", np.round(ym.mean(axis=axes), 4))

dx = bn_backward(dy, cache)
dxm = modified_backward(dy, mcache)
for name, fwd, analytic in (("batch", bn_forward, dx), ("modified", modified_forward, dxm)):
    err = gradcheck(lambda z: (dy * fwd(z)[0]).sum(), x, analytic)
    print(f"{name:8s} backward vs central differences: max rel err {err:.2e}")

print("identities with no epsilon:")
print("  sum dX         (batch)    =", f"{np.abs(dx.sum(axis=axes)).max():.1e}")
print("  sum Y * dX     (batch)    =", f"{np.abs((y * dx).sum(axis=axes)).max():.1e}")
print("  sum X * dX     (modified) =", f"{np.abs((x * dxm).sum(axis=axes)).max():.1e}")

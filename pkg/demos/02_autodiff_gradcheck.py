"""Build a small graph by hand, backpropagate, and compare with finite differences.

Run:  python demos/02_autodiff_gradcheck.py
"""

import numpy as np

from mcmkd import tensor as T
from mcmkd.gradcheck import run_all
from mcmkd.nn import TransformerEncoder
from mcmkd.tensor import Tensor, grad_check

rng = np.random.default_rng(0)

# y = sum(gelu(x @ W)); gradients land on x and W
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
W = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
loss = T.tsum(T.gelu(T.matmul(x, W)))
loss.backward()
print("loss", loss.item())
print("dL/dW\n", W.grad)

rep = grad_check(lambda a, b: T.tsum(T.gelu(T.matmul(a, b))), [x, W])
print("finite differences:", rep)

# a two-block transformer, every parameter checked
enc = TransformerEncoder(length=4, d=8, heads=2, layers=2, mlp_hidden=16, rng=rng)
seq = Tensor(rng.normal(size=(4, 8)))
rep = grad_check(lambda *ps: T.tsum(T.mul(enc(seq), enc(seq))), enc.parameters(), eps=1e-4)
print(f"transformer ({enc.num_parameters()} params):", rep)

print("\nfull op suite:")
for name, r in run_all().items():
    print(f"  {name:<18} {r.max_rel_error:.1e}")

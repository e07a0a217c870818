"""Why the derivative weights stay bounded: contraction of stochastic products.

The weight recursion multiplies column-stochastic interaction matrices whose
entries are floored at alpha/N.  Such matrices have Dobrushin coefficient at
most 1 - alpha, the coefficient is sub-multiplicative, and products applied
to zero-sum vectors (or composed with the centering projector) decay
geometrically -- which is exactly what keeps the centered weights from
blowing up over arbitrarily long runs.
"""

import numpy as np

from particle_rml import dobrushin_tau, lambda_product_norm, random_floored_stochastic

gen = np.random.default_rng(3)
n, alpha = 6, 0.25
beta = 1 - alpha

print(f"n = {n}, entry floor alpha/n with alpha = {alpha}")
a = random_floored_stochastic(n, alpha, gen)
b = random_floored_stochastic(n, alpha, gen)
print(f"tau(A) = {dobrushin_tau(a):.4f}  (bound 1 - alpha = {beta})")
print(f"tau(AB) = {dobrushin_tau(a @ b):.4f} <= tau(A) tau(B) = "
      f"{dobrushin_tau(a) * dobrushin_tau(b):.4f}")

print("\ncentered product norm vs the geometric envelope 4 n beta^(k-1):")
mats = []
for k in range(1, 25):
    mats.append(random_floored_stochastic(n, alpha, gen))
    if k % 4 == 0:
        norm = lambda_product_norm(mats)
        print(f"  k = {k:>2d}: ||A_1..A_k Lambda|| = {norm:.3e}   "
              f"envelope {4 * n / beta * beta**k:.3e}")

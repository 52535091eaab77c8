"""Walk through the truncated higher-order SVD of a convolution kernel.

Decomposes a random (C, W, T, H) = (64, 3, 96, 3) kernel at a sweep of rank
bounds and tabulates, for each configuration: stored parameters, compression
ratio, the measured reconstruction error, and the per-mode discarded-spectrum
bound the error must respect.

Run:  python3 demos/compress_random_kernel.py
"""

import numpy as np

from tcnn import tucker_decompose, tucker_reconstruct, unfold
from tcnn.model import tucker_param_count

C, W, T, H = 64, 3, 96, 3
rng = np.random.default_rng(42)

# Random dense kernels are nearly full-rank and barely compress; trained
# weights concentrate their energy in a few directions. Mimic that with a
# geometrically decaying mixture of separable terms plus a little noise.
kernel = 1e-3 * rng.standard_normal((C, W, T, H))
for k in range(12):
    term = np.einsum("i,j,k,l->ijkl",
                     rng.standard_normal(C), rng.standard_normal(W),
                     rng.standard_normal(T), rng.standard_normal(H))
    kernel += 0.6**k * term / np.linalg.norm(term)

dense_params = kernel.size
norm = np.linalg.norm(kernel)
print(f"kernel dims (C, W, T, H) = {kernel.shape}, dense parameters {dense_params}")

print(f"\n{'ranks':>16} {'stored':>8} {'ratio':>7} {'rel err':>10} {'bound':>10}")
for bound_r in (64, 32, 16, 8, 4, 2, 1):
    ranks = (min(bound_r, C), min(3, W), min(bound_r, T), min(3, H))
    factors = tucker_decompose(kernel, ranks)
    rec = tucker_reconstruct(factors)
    rel_err = np.linalg.norm(rec - kernel) / norm

    # quasi-optimality: squared error <= sum of discarded squared singular
    # values over the four mode unfoldings
    discard2 = sum(
        float(np.sum(np.linalg.svd(unfold(kernel, i), compute_uv=False)[ranks[i]:] ** 2))
        for i in range(4)
    )
    bound_rel = np.sqrt(discard2) / norm

    stored = tucker_param_count(kernel.shape, ranks)
    print(f"{str(ranks):>16} {stored:>8} {dense_params / stored:>6.1f}x "
          f"{rel_err:>10.3e} {bound_rel:>10.3e}")
    assert rel_err <= bound_rel * (1 + 1e-10) + 1e-12

print("\nevery measured error sits inside its discarded-spectrum bound")

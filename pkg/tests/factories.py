"""Random instance factories shared by the test modules."""

import numpy as np

from pqplan.optimizer import IlpInstance


def random_instance(rng, L, N, K, *, bits=None, theta=None, tight=0.6, unsupported=0.0,
                    B=None, eta=None, xi=None, n=None, comm=0.0):
    bits = tuple(sorted(bits if bits is not None else rng.choice([3, 4, 8, 16], K, replace=False)))
    K = len(bits)
    speed = rng.uniform(0.5, 2.0, N)
    per_bit = rng.uniform(0.5, 1.5, K)
    var = rng.uniform(0.8, 1.2, (L, N, K))
    pre = speed[None, :, None] * per_bit[None, None, :] * var
    dec = 0.05 * speed[None, :, None] * (np.array(bits) / 16.0)[None, None, :] * rng.uniform(0.8, 1.2, (L, N, K))
    mask = rng.random((N, K)) < unsupported
    mask[:, -1] = False  # keep at least one bit usable everywhere
    pre[:, mask] = np.inf
    dec[:, mask] = np.inf
    mem = (np.array(bits)[None, :] * rng.integers(80, 120, (L, 1))).astype(np.int64)
    share = mem[:, -1].sum() / N
    budget = (share * rng.uniform(tight, tight + 0.8, N)).astype(np.int64)
    omega = np.zeros((L, K))
    for k, b in enumerate(bits):
        if b < 16:
            omega[:, k] = rng.uniform(0.1, 1.0, L) * 4.0 ** (-(b - 3))
    B = B or int(rng.choice([4, 8]))
    xi = xi or int(rng.choice([d for d in range(1, B + 1) if B % d == 0]))
    eta = eta or int(rng.integers(1, xi + 1))
    n = n or int(rng.integers(2, 20))
    return IlpInstance(
        bits=bits, lat_pre=pre, lat_dec=dec, mem=mem, budget=budget, omega=omega,
        theta=float(rng.uniform(0, 5) if theta is None else theta),
        global_batch=B, eta=eta, xi=xi, gen_len=n,
        comm_pre=rng.uniform(0, comm, N), comm_dec=rng.uniform(0, comm * 0.05, N))

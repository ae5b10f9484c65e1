"""How many coupled Newton-Schulz iterations an inverse square root needs, by condition number.

Run: python3 demos/whitening_iterations.py
"""

import numpy as np

from amsnet.norm import WhitenConfig, inverse_sqrt
from amsnet.oracles import inverse_sqrt_eigh


def main():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    conds = [1e1, 1e2, 1e3]
    iters = [3, 5, 7, 10, 15, 20]
    print("cond   " + " ".join(f"T={t:<8d}" for t in iters))
    for cond in conds:
        s = (q * np.logspace(0, -np.log10(cond), 8)) @ q.T
        s = 0.5 * (s + s.T)
        ref = inverse_sqrt_eigh(s)
        errs = [np.abs(inverse_sqrt(s[None], WhitenConfig(8, ns_iterations=t))[0] - ref).max() for t in iters]
        print(f"{cond:<6.0e} " + " ".join(f"{e:<10.1e}" for e in errs))


if __name__ == "__main__":
    main()

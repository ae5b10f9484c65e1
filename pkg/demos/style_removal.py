"""Compare how IN, GW and their composition react to a per-channel photometric change.

Run: python3 demos/style_removal.py
"""

import numpy as np

from amsnet import InParams, VariantKind, WhitenConfig, group_whiten, instance_norm
from amsnet.ams import AmsParams, variant_forward
from amsnet.norm import group_partition


def cross_group_corr(y, g):
    v = group_partition(y, g)
    v = v - v.mean(axis=-1, keepdims=True)
    cov = np.einsum("bim,bjm->bij", v, v)
    d = np.sqrt(np.einsum("bii->bi", cov))
    corr = cov / (d[:, :, None] * d[:, None, :])
    off = corr[:, ~np.eye(g, dtype=bool)]
    return np.abs(off).mean()


def main():
    rng = np.random.default_rng(0)
    # content: two shared latent maps mixed into 16 channels, so groups are correlated
    latent = rng.normal(size=(4, 2, 8, 8))
    mix = rng.normal(size=(16, 2))
    x = np.einsum("ck,bkhw->bchw", mix, latent) + 0.1 * rng.normal(size=(4, 16, 8, 8))
    scale = rng.uniform(0.5, 2.0, (4, 16, 1, 1))
    shift = rng.uniform(-1, 1, (4, 16, 1, 1))
    styled = scale * x + shift

    p = InParams.identity(16, epsilon=1e-8)
    cfg = WhitenConfig(4)
    print(f"raw input change under restyling    {np.abs(styled - x).max():8.3f}")
    print(f"IN output change                    {np.abs(instance_norm(styled, p)[0] - instance_norm(x, p)[0]).max():8.1e}")
    print(f"GW output change                    {np.abs(group_whiten(styled, cfg)[0] - group_whiten(x, cfg)[0]).max():8.3f}")
    print()
    in_out = instance_norm(x, p)[0]
    print(f"mean |corr| between groups, input   {cross_group_corr(x, 4):.3f}")
    print(f"                          after IN  {cross_group_corr(in_out, 4):.3f}")
    print(f"                     after IN -> GW {cross_group_corr(group_whiten(in_out, cfg)[0], 4):.3f}")

    v = VariantKind("IN_GW")
    params = AmsParams.init(16, v, cfg, in_epsilon=1e-8)
    change = np.abs(variant_forward(styled, params, v) - variant_forward(x, params, v)).max()
    print(f"\nIN -> GW output change under restyling {change:.1e}")


if __name__ == "__main__":
    main()

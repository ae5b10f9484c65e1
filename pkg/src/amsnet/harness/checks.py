"""Self-test suite behind ``amsnet check``: invariants, oracles and gradient checks."""

from __future__ import annotations

import math
import os
import tempfile
from typing import Callable, List, Tuple

import numpy as np

from .. import oracles
from ..ams import AMS, AmsBlock
from ..core import grad_check
from ..losses import LossConfig, batch_hard_triplet, softmax_cross_entropy
from ..metrics import retrieval_eval
from ..norm import (EIGEN_EXACT, NEWTON_SCHULZ, InParams, WhitenConfig, group_merge,
                    group_partition, group_whiten, group_whiten_backward, instance_norm,
                    instance_norm_backward, inverse_sqrt)
from ..attention import (ChannelAttentionParams, SpatialAttentionParams,
                         channel_attention_backward, channel_attention_forward,
                         spatial_attention_backward, spatial_attention_forward)

Check = Tuple[str, Callable[[], Tuple[bool, str]]]


def _weighted(forward, backward, shape, rng):
    """Scalar probe ``sum(w * forward(x))`` with its analytic gradient."""
    w = rng.normal(size=shape)

    def f(x):
        y, cache = forward(x)
        return float(np.sum(w * y)), backward(w, cache)
    return f


def _in_stats():
    x = np.random.default_rng(1).normal(2.0, 3.0, (4, 8, 6, 6))
    y, _ = instance_norm(x, InParams.identity(8))
    mean_err = np.abs(y.mean(axis=(2, 3))).max()
    std_err = np.abs(y.std(axis=(2, 3)) - 1).max()
    return mean_err < 1e-6 and std_err < 1e-3, f"|mean|={mean_err:.1e} |std-1|={std_err:.1e}"


def _in_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 5, 4))
    g, b = rng.normal(size=3), rng.normal(size=3)
    y, _ = instance_norm(x, InParams(g, b))
    err = np.abs(y - oracles.instance_norm_loop(x, g, b)).max()
    return err < 1e-12, f"max diff {err:.1e}"


def _style_removal():
    # exact invariance holds as eps -> 0; eps = 1e-8 stands in for the limit
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 8, 6, 6))
    a = rng.uniform(0.5, 2.0, (4, 8, 1, 1))
    d = rng.uniform(-1, 1, (4, 8, 1, 1))
    p = InParams.identity(8, epsilon=1e-8)
    err = np.abs(instance_norm(a * x + d, p)[0] - instance_norm(x, p)[0]).max()
    return err < 1e-6, f"max change {err:.1e} at eps=1e-8"


def _whitening():
    x = np.random.default_rng(4).normal(size=(2, 64, 8, 8))
    out = []
    ok = True
    for mode, tol in ((EIGEN_EXACT, 1e-2), (NEWTON_SCHULZ, 5e-2)):
        y, _ = group_whiten(x, WhitenConfig(16, mode=mode))
        v = group_partition(y, 16)
        cov = np.einsum("bim,bjm->bij", v, v) / v.shape[-1]
        err = np.abs(cov - np.eye(16)).max()
        ok &= err < tol
        out.append(f"{mode}={err:.1e}")
    return ok, " ".join(out)


def _gw_oracle():
    x = np.random.default_rng(5).normal(size=(2, 8, 4, 4))
    y, _ = group_whiten(x, WhitenConfig(4, mode=EIGEN_EXACT))
    err = np.abs(y - oracles.group_whiten_loop(x, 4)).max()
    return err < 1e-9, f"max diff {err:.1e}"


def _inverse_sqrt_agreement():
    rng = np.random.default_rng(6)
    cfg = WhitenConfig(8, ns_iterations=20)
    worst = 0.0
    for _ in range(20):
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        eig = np.logspace(0, -3, 8)
        s = (q * eig) @ q.T
        s = 0.5 * (s + s.T)
        worst = max(worst, np.abs(inverse_sqrt(s[None], cfg)[0] - oracles.inverse_sqrt_eigh(s)).max())
    return worst < 1e-3, f"max diff {worst:.1e} (20 NS iterations, condition 1e3)"


def _partition_roundtrip():
    rng = np.random.default_rng(7)
    for _ in range(10):
        g = int(rng.choice([1, 2, 4, 8]))
        x = rng.normal(size=(2, g * int(rng.integers(1, 4)), 3, 5))
        if not np.array_equal(group_merge(group_partition(x, g), x.shape), x):
            return False, f"round trip differs at g={g}"
    return True, "bit exact"


def _grad_in():
    rng = np.random.default_rng(8)
    p = InParams(rng.normal(size=3), rng.normal(size=3))
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=x.shape)

    def f(x):
        y, st = instance_norm(x, p)
        return float(np.sum(w * y)), instance_norm_backward(w, x, p, st)[0]
    err = grad_check(f, x)
    return err < 1e-4, f"rel err {err:.1e}"


def _grad_gw():
    rng = np.random.default_rng(9)
    cfg = WhitenConfig(4)
    x = rng.normal(size=(2, 8, 3, 3))
    f = _weighted(lambda x: group_whiten(x, cfg), lambda w, st: group_whiten_backward(w, st, cfg), x.shape, rng)
    err = grad_check(f, x)
    return err < 1e-4, f"rel err {err:.1e}"


def _grad_ca():
    rng = np.random.default_rng(10)
    p = ChannelAttentionParams.init(8, 2, rng, scale=1.0)
    x = rng.normal(size=(2, 8, 3, 3))
    f = _weighted(lambda x: channel_attention_forward(x, p),
                  lambda w, c: channel_attention_backward(w, c)[0], x.shape, rng)
    err = grad_check(f, x)
    return err < 1e-4, f"rel err {err:.1e}"


def _grad_sa():
    rng = np.random.default_rng(11)
    p = SpatialAttentionParams.init(3, rng)
    x = rng.normal(size=(2, 4, 5, 5))
    f = _weighted(lambda x: spatial_attention_forward(x, p),
                  lambda w, c: spatial_attention_backward(w, c)[0], x.shape, rng)
    err = grad_check(f, x)
    return err < 1e-4, f"rel err {err:.1e}"


def _grad_ams():
    rng = np.random.default_rng(12)
    block = AmsBlock.build(8, AMS, WhitenConfig(4), reduction=2, sa_kernel=3, rng=rng)
    x = rng.normal(size=(2, 8, 4, 4))
    w = rng.normal(size=x.shape)

    def f(x):
        y = block.forward(x)
        return float(np.sum(w * y)), block.backward(w)
    err = grad_check(f, x)
    return err < 1e-3, f"rel err {err:.1e}"


def _grad_losses():
    rng = np.random.default_rng(13)
    logits = rng.normal(size=(6, 4))
    labels = np.array([0, 1, 2, 3, 0, 1])
    e1 = grad_check(lambda z: softmax_cross_entropy(z, labels), logits)
    feats = rng.normal(size=(8, 5))
    ids = np.repeat(np.arange(4), 2)
    e2 = grad_check(lambda z: batch_hard_triplet(z, ids, LossConfig()), feats)
    return max(e1, e2) < 1e-4, f"cross-entropy {e1:.1e} triplet {e2:.1e}"


def _loss_oracles():
    rng = np.random.default_rng(14)
    for _ in range(20):
        ids = rng.integers(0, 3, size=9)
        ids[:3] = [0, 1, 2]
        ids[3:6] = [0, 1, 2]
        f = rng.normal(size=(9, 4))
        if batch_hard_triplet(f, ids)[0] != oracles.batch_hard_triplet_scan(f, ids):
            return False, "triplet differs from exhaustive scan"
    ce = softmax_cross_entropy(np.zeros((5, 7)), np.arange(5))[0]
    return abs(ce - math.log(7)) < 1e-10, f"uniform CE - ln 7 = {ce - math.log(7):.1e}"


def _retrieval_oracle():
    rng = np.random.default_rng(15)
    for _ in range(10):
        G = int(rng.integers(2, 15))
        gids = rng.integers(0, 3, size=G)
        q = rng.normal(size=(3, 2))
        qids = rng.choice(gids, size=3)
        g = rng.normal(size=(G, 2))
        rep = retrieval_eval(q, qids, g, gids)
        aps, cmc = oracles.retrieval_enumerate(q, qids, g, gids)
        if list(rep.per_query_ap) != aps or list(rep.cmc) != cmc:
            return False, "report differs from enumeration"
    return True, "exact"


def _checkpoint_roundtrip():
    from .checkpoint import load_checkpoint, save_checkpoint
    from .config import TrainConfig
    from .train import build_model, model_from_checkpoint
    from .checkpoint import Checkpoint
    cfg = TrainConfig(variant="AMS", precision="float64")
    model = build_model(cfg, 5)
    x = np.random.default_rng(16).normal(size=(2, 3, 32, 16))
    ref = model.forward(x)[1]
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        save_checkpoint(Checkpoint(cfg.to_dict(), model.state_dict(), 0, 5), path)
        out = model_from_checkpoint(load_checkpoint(path)).forward(x)[1]
    return np.array_equal(ref, out), "bit identical" if np.array_equal(ref, out) else "outputs differ"


CHECKS: List[Check] = [
    ("instance norm statistics", _in_stats),
    ("instance norm loop oracle", _in_oracle),
    ("instance norm style removal", _style_removal),
    ("group whitening covariance", _whitening),
    ("group whitening loop oracle", _gw_oracle),
    ("inverse sqrt NS vs eigh", _inverse_sqrt_agreement),
    ("partition/merge round trip", _partition_roundtrip),
    ("gradient: instance norm", _grad_in),
    ("gradient: group whitening", _grad_gw),
    ("gradient: channel attention", _grad_ca),
    ("gradient: spatial attention", _grad_sa),
    ("gradient: full AMS block", _grad_ams),
    ("gradient: losses", _grad_losses),
    ("loss oracles", _loss_oracles),
    ("retrieval oracle", _retrieval_oracle),
    ("checkpoint round trip", _checkpoint_roundtrip),
]


def run_checks(report=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as err:  # a crashing check is a failing check
            ok, detail = False, f"{type(err).__name__}: {err}"
        all_ok &= bool(ok)
        report(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok

"""PK-batch training loop and leave-one-domain-out evaluation."""

from __future__ import annotations

import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from ..errors import InputError, NumericalError
from ..losses import LossConfig, batch_hard_triplet, softmax_cross_entropy, total_loss
from ..metrics import RetrievalReport, average_reports, retrieval_eval
from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import (SyntheticDataset, augment, generate_domains, leave_one_out, merge_domains,
                   pk_sample, warn_replaced)
from .model import ReidNet
from .optim import Adam, lr_at


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: List[dict]
    model: ReidNet
    test_set: Optional[SyntheticDataset] = None
    train_domains: List[int] = field(default_factory=list)


def make_data(cfg: TrainConfig) -> List[SyntheticDataset]:
    return generate_domains(cfg.num_domains, cfg.ids_per_domain, cfg.images_per_id,
                            seed=cfg.effective_data_seed, height=cfg.image_height,
                            width=cfg.image_width, dtype=cfg.dtype, noise_std=cfg.noise_std,
                            camera_jitter=cfg.camera_jitter, max_shift=cfg.max_shift,
                            texture_strength=cfg.texture_strength)


def build_model(cfg: TrainConfig, num_classes: int) -> ReidNet:
    model = ReidNet(num_classes, cfg.widths, cfg.variant_kind, cfg.placements, cfg.whiten_config(),
                    cfg.ca_reduction, cfg.sa_kernel, cfg.in_epsilon, seed=cfg.seed)
    return model.astype(cfg.dtype)


def model_from_checkpoint(ckpt: Checkpoint) -> ReidNet:
    cfg = TrainConfig.from_dict(ckpt.config)
    model = build_model(cfg, ckpt.num_classes)
    model.load_state_dict(ckpt.params)
    return model


def _split_training(cfg: TrainConfig, data):
    """Returns (training datasets, held-out dataset or None)."""
    if data is None:
        data = make_data(cfg)
    if isinstance(data, SyntheticDataset):
        return [data], None
    data = list(data)
    if len(data) == 1:
        return data, None
    return leave_one_out(data, cfg.test_domain)


def train(cfg: TrainConfig, data: Union[None, SyntheticDataset, Sequence[SyntheticDataset]] = None,
          progress=None) -> TrainResult:
    """Train a ReidNet on every domain except ``cfg.test_domain``.

    ``data`` may be a list of domain datasets (leave-one-out is applied), a
    single dataset (trained on as is) or None (synthesised from ``cfg``).
    Any non-finite loss or gradient aborts with a NumericalError that carries
    the stage, epoch and step.
    """
    cfg.validate()
    dtype = cfg.dtype
    train_sets, test_set = _split_training(cfg, data)
    images, labels, _ = merge_domains(train_sets)
    images = images.astype(dtype, copy=False)
    num_classes = int(labels.max()) + 1

    model = build_model(cfg, num_classes)
    for msg in model.warnings:
        warnings.warn(msg)
    opt = Adam(model, weight_decay=cfg.weight_decay)
    loss_cfg = LossConfig(cfg.margin, cfg.lambda_tri)
    rng = np.random.default_rng([cfg.seed, 1])
    iters = cfg.iters_per_epoch or max(1, len(labels) // cfg.batch_size)
    params = list(model.named_parameters())

    log = []
    warned = False
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        sums = np.zeros(3)
        for step in range(iters):
            idx, replaced = pk_sample(labels, cfg.P, cfg.K, rng)
            if replaced and not warned:
                warn_replaced(replaced, "(some identities have fewer than K images)")
                warned = True
            x = augment(images[idx], rng, cfg.hflip, cfg.crop, cfg.erase)
            y = labels[idx]
            model.zero_grad()
            try:
                emb, logits = model.forward(x)
                cls, d_logits = softmax_cross_entropy(logits, y)
                tri, d_emb = batch_hard_triplet(emb, y, loss_cfg)
            except NumericalError as err:
                err.epoch, err.step = epoch, step
                raise
            total = total_loss(cls, tri, loss_cfg)
            if not math.isfinite(total):
                raise NumericalError("non-finite training loss", stage="loss", epoch=epoch, step=step)
            try:
                model.backward(cfg.lambda_tri * d_emb, d_logits)
            except NumericalError as err:
                err.epoch, err.step = epoch, step
                raise
            for name, owner, local in params:
                if not np.all(np.isfinite(owner.grads[local])):
                    raise NumericalError("non-finite gradient", stage=f"grad:{name}",
                                         epoch=epoch, step=step)
            opt.step(lr)
            sums += (total, cls, tri)
        mean = sums / iters
        entry = OrderedDict(epoch=epoch, lr=lr, loss=float(mean[0]), cls=float(mean[1]),
                            tri=float(mean[2]))
        log.append(entry)
        if progress is not None:
            progress(entry)

    ckpt = Checkpoint(cfg.to_dict(), model.state_dict(), cfg.epochs, num_classes,
                      opt.t, opt.state())
    return TrainResult(ckpt, log, model, test_set, [d.domain for d in train_sets])


def query_gallery_split(ids, query_fraction: float, rng: np.random.Generator):
    """Per identity, ``round(fraction * n)`` images (at least 1, at most n-1) become queries."""
    ids = np.asarray(ids)
    q = []
    for ident in np.unique(ids):
        members = np.flatnonzero(ids == ident)
        n = len(members)
        if n < 2:
            raise InputError(f"identity {ident} has a single image; it cannot be both query and gallery")
        nq = min(n - 1, max(1, int(round(query_fraction * n))))
        q.append(rng.choice(members, size=nq, replace=False))
    q = np.sort(np.concatenate(q))
    g = np.setdiff1d(np.arange(len(ids)), q)
    return q, g


def evaluate_embeddings(emb, ids, query_fraction: float = 0.25, splits: int = 10,
                        seed: int = 0) -> RetrievalReport:
    """Average the retrieval report over ``splits`` random query/gallery partitions."""
    ids = np.asarray(ids)
    reports = []
    for s in range(splits):
        q, g = query_gallery_split(ids, query_fraction, np.random.default_rng([seed, s]))
        reports.append(retrieval_eval(emb[q], ids[q], emb[g], ids[g]))
    return average_reports(reports)


def evaluate(model: Union[Checkpoint, ReidNet], dataset: SyntheticDataset,
             query_fraction: Optional[float] = None, splits: Optional[int] = None, seed: int = 0,
             allow_seen_domain: bool = False, train_domains: Optional[Sequence[int]] = None
             ) -> RetrievalReport:
    """Embed ``dataset`` with a frozen model and score query/gallery retrieval.

    A checkpoint carries its config, so the held-out domain is checked and
    evaluating on a training domain needs ``allow_seen_domain=True``.
    """
    cfg = None
    if isinstance(model, Checkpoint):
        cfg = TrainConfig.from_dict(model.config)
        if train_domains is None:
            train_domains = [k for k in range(cfg.num_domains) if k != cfg.test_domain]
        model = model_from_checkpoint(model)
    if train_domains is not None and dataset.domain in set(train_domains) and not allow_seen_domain:
        raise InputError(f"domain {dataset.domain} was used for training; pass allow_seen_domain=True")
    if query_fraction is None:
        query_fraction = cfg.query_fraction if cfg else 0.25
    if splits is None:
        splits = cfg.eval_splits if cfg else 10
    dtype = model.stem.params["weight"].dtype
    emb = model.embed_batched(dataset.images, 128, dtype).astype(np.float64)
    if not np.all(np.isfinite(emb)):
        raise NumericalError("non-finite embedding", stage="evaluate")
    return evaluate_embeddings(emb, dataset.ids, query_fraction, splits, seed)


def run(cfg: TrainConfig, data=None, progress=None):
    """Train, then evaluate on the held-out domain. Returns (TrainResult, RetrievalReport)."""
    datasets = list(data) if data is not None else make_data(cfg)
    result = train(cfg, datasets, progress)
    report = evaluate(result.checkpoint, result.test_set)
    return result, report

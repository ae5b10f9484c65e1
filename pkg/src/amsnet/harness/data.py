"""Synthetic multi-domain identity data.

An identity is a coloured multi-part layout (head, torso, legs and a few
accessory patches) on a neutral background. A domain renders identities under
its own photometric style: a per-channel affine map built from an
illumination gain, a contrast factor and per-channel colour gains, plus an
additive background texture and pixel noise. Individual images additionally
get a small translation and a per-image jitter of the photometric style,
playing the role of different cameras within one domain.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, InputError


@dataclass(frozen=True)
class SyntheticDomainSpec:
    domain_id: int
    illumination: float = 1.0
    contrast: float = 1.0
    color_gains: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    texture_seed: int = 0
    texture_strength: float = 0.0
    noise_std: float = 0.0
    # per-image log-normal jitter of gain/contrast and max translation in pixels
    camera_jitter: float = 0.0
    max_shift: int = 0

    def __post_init__(self):
        if self.illumination <= 0 or self.contrast <= 0 or min(self.color_gains) <= 0:
            raise ConfigError(f"domain {self.domain_id}: gains must be positive")
        if self.noise_std < 0 or self.camera_jitter < 0 or self.max_shift < 0:
            raise ConfigError(f"domain {self.domain_id}: noise, jitter and shift must be non-negative")

    def style_key(self):
        return (self.illumination, self.contrast, tuple(self.color_gains), self.texture_seed,
                self.texture_strength, self.noise_std, self.camera_jitter, self.max_shift)

    def affine(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-channel ``(scale, offset)`` so that ``image = scale * base + offset``."""
        gains = self.illumination * np.asarray(self.color_gains, dtype=np.float64)
        return gains * self.contrast, gains * 0.5 * (1.0 - self.contrast)

    @classmethod
    def identity(cls, domain_id: int = 0) -> "SyntheticDomainSpec":
        return cls(domain_id)


@dataclass
class Prototype:
    image: np.ndarray   # (3, H, W) in [0, 1]
    mask: np.ndarray    # (H, W) bool, True on the figure


@dataclass
class SyntheticDataset:
    images: np.ndarray          # (N, 3, H, W)
    ids: np.ndarray             # (N,) dense labels in [0, M_k)
    domain: int
    spec: SyntheticDomainSpec
    prototypes: List[Prototype] = field(repr=False, default_factory=list)

    @property
    def num_ids(self) -> int:
        return int(self.ids.max()) + 1 if self.ids.size else 0

    def __len__(self):
        return len(self.ids)


BACKGROUND = 0.5


def make_prototype(rng: np.random.Generator, height: int = 32, width: int = 16) -> Prototype:
    """Random person-like layout: coloured head, torso, legs and 1-3 accessory patches."""
    if height < 8 or width < 6:
        raise ConfigError(f"image size {height}x{width} too small for a layout")
    img = np.full((3, height, width), BACKGROUND)
    mask = np.zeros((height, width), dtype=bool)

    def fill(r0, r1, c0, c1, color):
        r0, r1 = max(0, r0), min(height, r1)
        c0, c1 = max(0, c0), min(width, c1)
        if r1 > r0 and c1 > c0:
            img[:, r0:r1, c0:c1] = np.asarray(color)[:, None, None]
            mask[r0:r1, c0:c1] = True

    cx = width // 2 + int(rng.integers(-1, 2))
    head = rng.uniform(0.3, 0.9, 3)
    torso = rng.uniform(0.0, 1.0, 3)
    legs = rng.uniform(0.0, 1.0, 3)
    hw = max(1, int(round(width * rng.uniform(0.12, 0.2))))
    tw = max(2, int(round(width * rng.uniform(0.25, 0.4))))
    h0, h1 = int(0.05 * height), int(0.2 * height)
    t0, t1 = h1 + 1, int(rng.uniform(0.5, 0.62) * height)
    l1 = int(0.96 * height)
    fill(h0, h1, cx - hw, cx + hw, head)
    fill(t0, t1, cx - tw, cx + tw, torso)
    gap = int(rng.integers(0, 2))
    leg_w = max(1, tw - 1)
    fill(t1, l1, cx - leg_w - gap, cx - gap, legs)
    fill(t1, l1, cx + gap, cx + leg_w + gap, legs)
    for _ in range(int(rng.integers(1, 4))):
        ph = int(rng.integers(2, max(3, height // 6)))
        pw = int(rng.integers(2, max(3, width // 4)))
        r0 = int(rng.integers(t0, max(t0 + 1, l1 - ph)))
        c0 = int(rng.integers(0, max(1, width - pw)))
        fill(r0, r0 + ph, c0, c0 + pw, rng.uniform(0.0, 1.0, 3))
    return Prototype(img, mask)


def make_texture(seed: int, height: int, width: int) -> np.ndarray:
    """Smooth periodic colour texture in [-0.5, 0.5], deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(-0.5, 0.5, size=(3, max(1, height // 4), max(1, width // 4)))
    tex = np.kron(coarse, np.ones((1, 4, 4)))
    tex = np.pad(tex, ((0, 0), (0, max(0, height - tex.shape[1])), (0, max(0, width - tex.shape[2]))),
                 mode="wrap")[:, :height, :width]
    stripe = 0.5 * np.sin(np.arange(height)[:, None] * rng.uniform(0.3, 1.2)
                          + np.arange(width)[None, :] * rng.uniform(0.0, 0.8))
    return 0.6 * tex + 0.4 * stripe[None] * rng.uniform(-1, 1, size=(3, 1, 1))


def render(proto: Prototype, spec: SyntheticDomainSpec, rng: Optional[np.random.Generator] = None,
           texture: Optional[np.ndarray] = None) -> np.ndarray:
    """Render one image of ``proto`` in the style of ``spec``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    _, H, W = proto.image.shape
    base = proto.image
    mask = proto.mask
    if spec.max_shift:
        dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
        base = np.roll(base, (int(dy), int(dx)), axis=(1, 2))
        mask = np.roll(mask, (int(dy), int(dx)), axis=(0, 1))
    if spec.texture_strength:
        tex = texture if texture is not None else make_texture(spec.texture_seed, H, W)
        oy, ox = rng.integers(0, H), rng.integers(0, W)
        tex = np.roll(tex, (int(oy), int(ox)), axis=(1, 2))
        base = base + spec.texture_strength * tex * (~mask)[None]
    scale, offset = spec.affine()
    if spec.camera_jitter:
        scale = scale * np.exp(rng.normal(0.0, spec.camera_jitter, 3))
        offset = offset + rng.normal(0.0, spec.camera_jitter, 3) * 0.5
    img = scale[:, None, None] * base + offset[:, None, None]
    if spec.noise_std:
        img = img + rng.normal(0.0, spec.noise_std, img.shape)
    return img


def random_domain_specs(num_domains: int, seed: int, noise_std: float = 0.02,
                        camera_jitter: float = 0.25, max_shift: int = 2,
                        texture_strength: float = 0.4) -> List[SyntheticDomainSpec]:
    """Draw well-separated photometric styles, one per domain."""
    rng = np.random.default_rng([seed, 7])
    specs = []
    for k in range(num_domains):
        specs.append(SyntheticDomainSpec(
            domain_id=k,
            illumination=float(rng.uniform(0.4, 2.0)),
            contrast=float(rng.uniform(0.4, 1.6)),
            color_gains=tuple(float(v) for v in rng.uniform(0.4, 1.6, 3)),
            texture_seed=int(rng.integers(1 << 30)),
            texture_strength=texture_strength,
            noise_std=noise_std,
            camera_jitter=camera_jitter,
            max_shift=max_shift,
        ))
    return specs


def generate_domains(num_domains: int, ids_per_domain: int, images_per_id: int, seed: int = 0,
                     specs: Optional[Sequence[SyntheticDomainSpec]] = None,
                     height: int = 32, width: int = 16, dtype=np.float64,
                     **spec_kwargs) -> List[SyntheticDataset]:
    """Render ``num_domains`` datasets; each domain gets its own disjoint identities.

    Deterministic in ``seed`` (and ``specs`` when given).
    """
    if num_domains < 2:
        raise ConfigError(f"need at least 2 domains, got {num_domains}")
    if specs is None:
        specs = random_domain_specs(num_domains, seed, **spec_kwargs)
    specs = list(specs)
    if len(specs) != num_domains:
        raise ConfigError(f"{len(specs)} domain specs for {num_domains} domains")
    seen = {}
    for s in specs:
        if s.style_key() in seen:
            raise ConfigError(f"domains {seen[s.style_key()]} and {s.domain_id} have identical styles")
        seen[s.style_key()] = s.domain_id

    out = []
    for k, spec in enumerate(specs):
        rng = np.random.default_rng([seed, 1000 + k])
        protos = [make_prototype(rng, height, width) for _ in range(ids_per_domain)]
        texture = make_texture(spec.texture_seed, height, width)
        images = np.empty((ids_per_domain * images_per_id, 3, height, width), dtype=dtype)
        ids = np.repeat(np.arange(ids_per_domain), images_per_id)
        for n, label in enumerate(ids):
            images[n] = render(protos[label], spec, rng, texture)
        out.append(SyntheticDataset(images, ids, spec.domain_id, spec, protos))
    return out


def leave_one_out(datasets: Sequence[SyntheticDataset], test_domain: int):
    """Split into (training datasets, held-out dataset); asserts no domain leaks."""
    train = [d for d in datasets if d.domain != test_domain]
    test = [d for d in datasets if d.domain == test_domain]
    if len(test) != 1:
        raise InputError(f"test domain {test_domain} not found exactly once")
    assert not ({d.domain for d in train} & {test[0].domain}), "train/test domain leak"
    return train, test[0]


def merge_domains(datasets: Sequence[SyntheticDataset]):
    """Concatenate datasets, offsetting labels so identities stay distinct across domains."""
    images, labels, domains = [], [], []
    offset = 0
    for d in datasets:
        images.append(d.images)
        labels.append(d.ids + offset)
        domains.append(np.full(len(d), d.domain))
        offset += d.num_ids
    return np.concatenate(images), np.concatenate(labels), np.concatenate(domains)


def pk_sample(labels, P: int, K: int, rng: np.random.Generator):
    """Indices of a P x K batch: P distinct identities, K images each.

    Returns ``(indices, replaced)``; ``replaced`` is True when some identity
    had fewer than K images and was sampled with replacement.
    """
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < P:
        raise InputError(f"pool has {len(uniq)} identities, batch needs P={P}")
    chosen = rng.choice(uniq, size=P, replace=False)
    idx = []
    replaced = False
    for ident in chosen:
        members = np.flatnonzero(labels == ident)
        if len(members) < 2:
            raise InputError(f"identity {ident} has a single image; it cannot supply positives")
        if len(members) >= K:
            idx.append(rng.choice(members, size=K, replace=False))
        else:
            replaced = True
            idx.append(rng.choice(members, size=K, replace=True))
    return np.concatenate(idx), replaced


def augment(batch: np.ndarray, rng: np.random.Generator, hflip: bool = True, crop: bool = True,
            erase: bool = True, pad: int = 2) -> np.ndarray:
    """Random horizontal flip, padded random crop and random erasing, per image."""
    out = batch.copy()
    N, C, H, W = out.shape
    for i in range(N):
        img = out[i]
        if hflip and rng.random() < 0.5:
            img = img[:, :, ::-1]
        if crop:
            padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
            oy, ox = rng.integers(0, 2 * pad + 1, size=2)
            img = padded[:, oy:oy + H, ox:ox + W]
        if erase and rng.random() < 0.5:
            area = rng.uniform(0.02, 0.2) * H * W
            aspect = rng.uniform(0.3, 3.3)
            eh = int(min(H, max(1, round(np.sqrt(area * aspect)))))
            ew = int(min(W, max(1, round(np.sqrt(area / aspect)))))
            y0 = int(rng.integers(0, H - eh + 1))
            x0 = int(rng.integers(0, W - ew + 1))
            img = img.copy()
            img[:, y0:y0 + eh, x0:x0 + ew] = rng.uniform(img.min(), img.max(), size=(C, 1, 1))
        out[i] = img
    return out


def export_datasets(datasets: Sequence[SyntheticDataset], directory: str) -> str:
    """Write raw little-endian tensors plus ``manifest.json``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for d in datasets:
        img_name = f"domain{d.domain}_images.bin"
        id_name = f"domain{d.domain}_ids.bin"
        d.images.astype(d.images.dtype.newbyteorder("<")).tofile(os.path.join(directory, img_name))
        d.ids.astype("<i8").tofile(os.path.join(directory, id_name))
        entries.append({
            "domain": d.domain,
            "images": img_name,
            "images_shape": list(d.images.shape),
            "images_dtype": np.dtype(d.images.dtype).newbyteorder("<").str,
            "ids": id_name,
            "ids_dtype": "<i8",
            "num_ids": d.num_ids,
            "style": asdict(d.spec),
        })
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump({"format_version": 1, "domains": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_datasets(directory: str) -> List[SyntheticDataset]:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    out = []
    for e in manifest["domains"]:
        images = np.fromfile(os.path.join(directory, e["images"]), dtype=e["images_dtype"])
        images = images.reshape(e["images_shape"]).astype(np.dtype(e["images_dtype"]).newbyteorder("="))
        ids = np.fromfile(os.path.join(directory, e["ids"]), dtype=e["ids_dtype"]).astype(np.int64)
        style = dict(e["style"])
        style["color_gains"] = tuple(style["color_gains"])
        out.append(SyntheticDataset(images, ids, e["domain"], SyntheticDomainSpec(**style)))
    return out


def warn_replaced(replaced: bool, context: str = ""):
    if replaced:
        warnings.warn(f"PK sampling drew with replacement {context}".strip())

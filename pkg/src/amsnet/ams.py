"""The attention-aware multi-operation (AMS) block and its combination variants.

Canonical block::

    f_in  = IN(x)
    f_in' = f_in + SA(f_in)
    f_gw  = GW(f_in')
    out   = f_gw + CA(f_gw)

Other combinations of the IN and GW stages (tandem in either order,
parallel sum, and the two "stage plus tandem" sums) are selected with
:class:`VariantKind`; each stage may carry no attention, SA, CA, or CA
followed by SA, always added back through the same residual form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .attention import (ChannelAttention, ChannelAttentionParams, SpatialAttention,
                        SpatialAttentionParams)
from .core import Layer, as_array
from .errors import ConfigError, NumericalError
from .norm import GroupWhiten, InParams, InstanceNorm, WhitenConfig, check_groups

COMBINATIONS = ("IN_GW", "GW_IN", "IN_and_GW", "IN_XGW", "GW_XIN", "IN_only", "GW_only", "none")
ATTENTIONS = ("none", "SA", "CA", "CASA")

_USES_IN = {"IN_GW", "GW_IN", "IN_and_GW", "IN_XGW", "GW_XIN", "IN_only"}
_USES_GW = {"IN_GW", "GW_IN", "IN_and_GW", "IN_XGW", "GW_XIN", "GW_only"}

_ALIASES = {"IN": "IN_only", "GW": "GW_only", "baseline": "none",
            "IN|GW": "IN_GW", "GW|IN": "GW_IN", "IN&GW": "IN_and_GW",
            "IN|XGW": "IN_XGW", "GW|XIN": "GW_XIN"}


@dataclass(frozen=True)
class VariantKind:
    combination: str = "IN_GW"
    attn_in: str = "none"
    attn_gw: str = "none"

    def __post_init__(self):
        comb = _ALIASES.get(self.combination, self.combination)
        if comb not in COMBINATIONS:
            raise ConfigError(f"unknown combination {self.combination!r}; expected one of {COMBINATIONS}")
        for sel in (self.attn_in, self.attn_gw):
            if sel not in ATTENTIONS:
                raise ConfigError(f"unknown attention selector {sel!r}; expected one of {ATTENTIONS}")
        object.__setattr__(self, "combination", comb)
        # selectors for a stage the combination lacks are ignored
        if comb not in _USES_IN:
            object.__setattr__(self, "attn_in", "none")
        if comb not in _USES_GW:
            object.__setattr__(self, "attn_gw", "none")

    @property
    def uses_in(self) -> bool:
        return self.combination in _USES_IN

    @property
    def uses_gw(self) -> bool:
        return self.combination in _USES_GW

    @property
    def name(self) -> str:
        if self.attn_in == "none" and self.attn_gw == "none":
            return self.combination
        if self == AMS:
            return "AMS"
        return f"{self.combination}:{self.attn_in}:{self.attn_gw}"

    @classmethod
    def parse(cls, text: str) -> "VariantKind":
        """Parse ``"IN_GW"``, ``"AMS"`` or ``"IN_GW:SA:CA"`` style names."""
        text = text.strip()
        if text == "AMS":
            return AMS
        parts = text.split(":")
        if len(parts) == 1:
            return cls(parts[0])
        if len(parts) == 3:
            return cls(*parts)
        raise ConfigError(f"cannot parse variant {text!r}; use COMBINATION or COMBINATION:ATTN_IN:ATTN_GW")

    def __str__(self):
        return self.name


AMS = VariantKind("IN_GW", "SA", "CA")
BASELINE = VariantKind("none")

# rows of the combination and attention-placement comparisons
COMBINATION_TABLE = [VariantKind(c) for c in
                     ("none", "IN_only", "GW_only", "IN_and_GW", "IN_XGW", "GW_XIN", "GW_IN", "IN_GW")]
ATTENTION_TABLE = [VariantKind("IN_GW", a, b) for a, b in
                   (("CA", "SA"), ("SA", "CA"), ("CA", "CA"), ("SA", "SA"),
                    ("SA", "CASA"), ("CASA", "CA"), ("CASA", "CASA"))]


@dataclass
class StageAttention:
    ca: Optional[ChannelAttentionParams] = None
    sa: Optional[SpatialAttentionParams] = None

    def selector(self) -> str:
        if self.ca is not None and self.sa is not None:
            return "CASA"
        if self.ca is not None:
            return "CA"
        if self.sa is not None:
            return "SA"
        return "none"

    @classmethod
    def init(cls, selector: str, channels: int, reduction: int, k: int, rng) -> "StageAttention":
        ca = ChannelAttentionParams.init(channels, reduction, rng) if "CA" in selector else None
        sa = SpatialAttentionParams.init(k, rng) if "SA" in selector else None
        return cls(ca, sa)


@dataclass
class AmsParams:
    in_params: InParams
    whiten_cfg: WhitenConfig
    in_attention: StageAttention = field(default_factory=StageAttention)
    gw_attention: StageAttention = field(default_factory=StageAttention)

    @property
    def channels(self) -> int:
        return self.in_params.gamma.shape[0]

    @classmethod
    def init(cls, channels: int, variant: VariantKind = AMS, whiten_cfg: Optional[WhitenConfig] = None,
             reduction: int = 16, sa_kernel: int = 7, in_epsilon: float = 1e-5, rng=None) -> "AmsParams":
        """Fresh parameters for ``variant``: gamma=1, beta=0, random attention weights."""
        whiten_cfg = whiten_cfg or WhitenConfig()
        if variant.uses_gw:
            check_groups(channels, whiten_cfg.group_count)
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(InParams.identity(channels, in_epsilon), whiten_cfg,
                   StageAttention.init(variant.attn_in, channels, reduction, sa_kernel, rng),
                   StageAttention.init(variant.attn_gw, channels, reduction, sa_kernel, rng))

    def validate(self, variant: VariantKind):
        for stage, att, want in (("IN", self.in_attention, variant.attn_in),
                                 ("GW", self.gw_attention, variant.attn_gw)):
            if att.selector() != want:
                raise ConfigError(f"{stage} attention parameters provide {att.selector()!r} "
                                  f"but the variant asks for {want!r}")
            for p in (att.ca, att.sa):
                if isinstance(p, ChannelAttentionParams) and p.channels != self.channels:
                    raise ConfigError(f"{stage} channel attention has C={p.channels}, block has {self.channels}")
        if variant.uses_gw:
            check_groups(self.channels, self.whiten_cfg.group_count)


class Stage(Layer):
    """A normalizer followed by residual attention: ``f = norm(x); f = f + A(f)`` per attention."""

    def __init__(self, label: str, norm: Layer, attention: StageAttention):
        super().__init__()
        self.label = label
        self.add("norm", norm)
        self._attn = []
        # CBAM order: channel first, then spatial
        if attention.ca is not None:
            self._attn.append(self.add("ca", ChannelAttention(attention.ca.channels, params=attention.ca)))
        if attention.sa is not None:
            self._attn.append(self.add("sa", SpatialAttention(params=attention.sa)))

    def forward(self, x):
        f = self.children["norm"].forward(x)
        for att in self._attn:
            f = f + att.forward(f)
        return f

    def backward(self, dout):
        for att in reversed(self._attn):
            dout = dout + att.backward(dout)
        return self.children["norm"].backward(dout)


def _check_finite(arr, stage):
    if not np.isfinite(arr).all():
        raise NumericalError("non-finite activations", stage=stage)


class AmsBlock(Layer):
    """One AMS insertion. Parameters are shared by reference with ``params``."""

    def __init__(self, params: AmsParams, variant: VariantKind = AMS, name: str = "ams"):
        super().__init__()
        params.validate(variant)
        self.variant = variant
        self.name = name
        self.channels = params.channels
        self.whiten_cfg = params.whiten_cfg
        self.in_stage = self.gw_stage = None
        if variant.uses_in:
            norm = InstanceNorm(params.channels, params.in_params.epsilon)
            norm.params["gamma"] = params.in_params.gamma
            norm.params["beta"] = params.in_params.beta
            norm.grads["gamma"] = np.zeros_like(norm.params["gamma"])
            norm.grads["beta"] = np.zeros_like(norm.params["beta"])
            self.in_stage = self.add("in", Stage("in", norm, params.in_attention))
        if variant.uses_gw:
            self.gw_stage = self.add("gw", Stage("gw", GroupWhiten(params.whiten_cfg), params.gw_attention))

    @classmethod
    def build(cls, channels: int, variant: VariantKind = AMS, whiten_cfg=None, reduction: int = 16,
              sa_kernel: int = 7, in_epsilon: float = 1e-5, rng=None, name: str = "ams") -> "AmsBlock":
        p = AmsParams.init(channels, variant, whiten_cfg, reduction, sa_kernel, in_epsilon, rng)
        return cls(p, variant, name)

    def _run(self, stage: Stage, x):
        label = f"{self.name}.{stage.label}"
        try:
            out = stage.forward(x)
        except NumericalError as err:
            err.stage = f"{label}.{err.stage}" if err.stage else label
            raise
        _check_finite(out, label)
        return out

    def forward(self, x):
        x = as_array(x)
        comb = self.variant.combination
        if comb == "none":
            return x
        if comb == "IN_only":
            return self._run(self.in_stage, x)
        if comb == "GW_only":
            return self._run(self.gw_stage, x)
        if comb == "IN_GW":
            return self._run(self.gw_stage, self._run(self.in_stage, x))
        if comb == "GW_IN":
            return self._run(self.in_stage, self._run(self.gw_stage, x))
        if comb == "IN_and_GW":
            return self._run(self.in_stage, x) + self._run(self.gw_stage, x)
        if comb == "IN_XGW":
            a = self._run(self.in_stage, x)
            return a + self._run(self.gw_stage, a)
        if comb == "GW_XIN":
            a = self._run(self.gw_stage, x)
            return a + self._run(self.in_stage, a)
        raise ConfigError(f"unhandled combination {comb!r}")

    def backward(self, dout):
        comb = self.variant.combination
        if comb == "none":
            return dout
        if comb == "IN_only":
            return self.in_stage.backward(dout)
        if comb == "GW_only":
            return self.gw_stage.backward(dout)
        if comb == "IN_GW":
            return self.in_stage.backward(self.gw_stage.backward(dout))
        if comb == "GW_IN":
            return self.gw_stage.backward(self.in_stage.backward(dout))
        if comb == "IN_and_GW":
            return self.in_stage.backward(dout) + self.gw_stage.backward(dout)
        if comb == "IN_XGW":
            return self.in_stage.backward(dout + self.gw_stage.backward(dout))
        if comb == "GW_XIN":
            return self.gw_stage.backward(dout + self.in_stage.backward(dout))
        raise ConfigError(f"unhandled combination {comb!r}")


def variant_forward(x, p: AmsParams, v: VariantKind) -> np.ndarray:
    """Forward pass of combination variant ``v`` with parameters ``p``."""
    return AmsBlock(p, v).forward(x)


def ams_forward(x, p: AmsParams) -> np.ndarray:
    """Canonical block: IN with spatial attention, then GW with channel attention."""
    return variant_forward(x, p, AMS)


class InstrumentedBackbone(Layer):
    """Backbone stages with AMS blocks spliced in after selected stages."""

    def __init__(self, stages: Sequence[Layer], blocks: Dict[int, Layer], warnings_: List[str]):
        super().__init__()
        self.ams_blocks = dict(blocks)
        self.warnings = list(warnings_)
        for i, stage in enumerate(stages, start=1):
            self.add(f"stage{i}", stage)
            if i in blocks:
                self.add(f"stage{i}_ams", blocks[i])

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.children.values()):
            dout = layer.backward(dout)
        return dout


def insert_ams(backbone: Sequence[Layer], placements: Iterable[int],
               factory: Callable[[int, int], Layer]) -> InstrumentedBackbone:
    """Follow each listed stage (1-based) with ``factory(stage_index, channels)``.

    Stages must expose ``out_channels``. Placing a block after the final stage
    is allowed but recorded in ``.warnings`` (and emitted as a UserWarning).
    """
    stages = list(backbone)
    placements = sorted(set(int(i) for i in placements))
    notes = []
    blocks = {}
    for i in placements:
        if not 1 <= i <= len(stages):
            raise ConfigError(f"placement {i} outside stages 1..{len(stages)}")
        if i == len(stages):
            msg = f"AMS placed after the final stage ({i}); the reference layout uses early stages only"
            warnings.warn(msg)
            notes.append(msg)
        channels = stages[i - 1].out_channels
        block = factory(i, channels)
        g = getattr(getattr(block, "whiten_cfg", None), "group_count", None)
        if g is not None and getattr(block, "variant", AMS).uses_gw:
            check_groups(channels, g)
        if hasattr(block, "name"):
            block.name = f"stage{i}.ams"
        blocks[i] = block
    return InstrumentedBackbone(stages, blocks, notes)

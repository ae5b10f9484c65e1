"""Variant and group-count ablations over several seeds."""

from __future__ import annotations

import csv
import io
import json
import statistics
import warnings
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Union

from ..ams import VariantKind
from ..errors import AmsError, ConfigError, NumericalError
from .config import TrainConfig
from .train import run

CSV_COLUMNS = ["variant", "group_count", "n_ok", "n_failed", "mAP_mean", "mAP_sd", "R1_mean", "R1_sd"]


@dataclass
class Row:
    variant: str
    group_count: int
    cells: List[dict] = field(default_factory=list)

    def _values(self, key):
        return [c[key] for c in self.cells if c["status"] == "ok"]

    @staticmethod
    def _mean_sd(vals):
        if not vals:
            return None, None  # every cell failed; never report NaN
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        return statistics.fmean(vals), sd

    def summary(self) -> dict:
        m, msd = self._mean_sd(self._values("map"))
        r, rsd = self._mean_sd(self._values("rank1"))
        ok = len(self._values("map"))
        return {"variant": self.variant, "group_count": self.group_count, "n_ok": ok,
                "n_failed": len(self.cells) - ok, "mAP_mean": m, "mAP_sd": msd,
                "R1_mean": r, "R1_sd": rsd}


@dataclass
class AblationTable:
    rows: List[Row]

    def row(self, variant: str, group_count: Optional[int] = None) -> Row:
        for r in self.rows:
            if r.variant == variant and (group_count is None or r.group_count == group_count):
                return r
        raise KeyError(variant)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.summary().items()})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_dict(self):
        return {"rows": [dict(r.summary(), cells=r.cells) for r in self.rows]}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _seed_list(seeds: Union[int, Iterable[int]]) -> List[int]:
    seeds = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ConfigError(f"ablations need at least 3 seeds, got {len(seeds)}")
    return seeds


def dedupe_variants(variants: Sequence[Union[str, VariantKind]]) -> List[VariantKind]:
    out, seen = [], set()
    for v in variants:
        kind = v if isinstance(v, VariantKind) else VariantKind.parse(v)
        if kind in seen:
            warnings.warn(f"duplicate variant {kind.name} dropped")
            continue
        seen.add(kind)
        out.append(kind)
    return out


def run_cell(cfg: TrainConfig, data=None) -> dict:
    """One training + evaluation; failures are captured, never raised."""
    cell = {"seed": cfg.seed, "status": "ok", "map": None, "rank1": None, "epoch_loss": [],
            "error": None}
    try:
        result, report = run(cfg, data)
        cell["map"], cell["rank1"] = float(report.map), report.rank(1)
        cell["epoch_loss"] = [e["loss"] for e in result.log]
    except NumericalError as err:
        cell["status"] = "numerical_abort"
        cell["error"] = err.to_dict()
    except AmsError as err:
        cell["status"] = "failed"
        cell["error"] = {"error": type(err).__name__, "message": str(err)}
    return cell


def ablate(variants: Sequence[Union[str, VariantKind]], cfg: TrainConfig,
           seeds: Union[int, Iterable[int]] = 3, progress=None) -> AblationTable:
    """Train and evaluate every (variant, seed) cell.

    The synthetic domains depend only on ``cfg.data_seed`` (or each cell's
    seed when it is unset), so variants are compared on identical data.
    """
    seeds = _seed_list(seeds)
    rows = []
    for kind in dedupe_variants(variants):
        row = Row(kind.name, cfg.group_count)
        for s in seeds:
            cell = run_cell(cfg.replace(variant=kind.name, seed=s))
            row.cells.append(cell)
            if progress is not None:
                progress(kind.name, cell)
        rows.append(row)
    return AblationTable(rows)


def group_sweep(cfg: TrainConfig, groups: Sequence[int] = (2, 4, 8, 16),
                seeds: Union[int, Iterable[int]] = 3, variant: str = "IN_GW",
                widths: Optional[Sequence[int]] = None, progress=None) -> AblationTable:
    """Same variant at several group counts; invalid or unstable cells are recorded, not raised."""
    seeds = _seed_list(seeds)
    base = cfg.replace(variant=variant, **({"widths": list(widths)} if widths else {}))
    rows = []
    for g in groups:
        row = Row(VariantKind.parse(variant).name, int(g))
        for s in seeds:
            try:
                cell_cfg = base.replace(group_count=int(g), seed=s)
            except ConfigError as err:
                cell = {"seed": s, "status": "failed", "map": None, "rank1": None,
                        "epoch_loss": [], "error": {"error": "ConfigError", "message": str(err)}}
            else:
                cell = run_cell(cell_cfg)
            row.cells.append(cell)
            if progress is not None:
                progress(f"g={g}", cell)
        rows.append(row)
    return AblationTable(rows)

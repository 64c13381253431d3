"""Ablation runner: one training run per cell, shared data seed, CSV out.

Axes mirror the study tables: query count, decoder depth with and without
calibration, reconstruction-loss weight, and the 2x2 component grid.
Desk-scale runs reproduce table *shapes* and report directions; absolute
full-scale numbers are out of scope.
"""
from __future__ import annotations

import csv
import io

from .config import Config
from .errors import ConfigurationError
from .metrics import THRESHOLDS
from .train import evaluate, train

NQ_VALUES = (1, 2, 4, 8, 16, 24, 32)
LAYER_VALUES = (1, 2, 3, 4)
OMEGA_VALUES = (0.0, 0.05, 0.10, 0.15, 0.20)
AXES = ("nq", "layers", "omega_re", "components")

_PR_COLUMNS = [f"pr@{int(t * 100)}" for t in THRESHOLDS]


def _cells(axis: str, base: Config) -> list[tuple[dict, Config]]:
    if axis == "nq":
        return [({"nq": n}, base.replace(num_queries=n)) for n in NQ_VALUES]
    if axis == "layers":
        out = []
        for n in LAYER_VALUES:
            for cdec in (True, False):
                out.append(({"layers": n, "cdec": "on" if cdec else "off"},
                            base.replace(decoder_layers=n, cdec_enabled=cdec)))
        return out
    if axis == "omega_re":
        return [({"omega_re": w}, base.replace(recon_weight=w)) for w in OMEGA_VALUES]
    if axis == "components":
        out = []
        for cdec in (True, False):
            for recon in (True, False):
                out.append((
                    {"cdec": "on" if cdec else "off", "recon_loss": "on" if recon else "off"},
                    base.replace(cdec_enabled=cdec,
                                 recon_weight=base.recon_weight if recon else 0.0),
                ))
        return out
    raise ConfigurationError(f"unknown ablation axis {axis!r}; pick one of {AXES}")


def run_axis(axis: str, base: Config, eval_split: str = "val") -> list[dict]:
    """Train every cell of the axis and collect metric rows."""
    from . import data as data_mod

    rows = []
    train_samples = data_mod.gen_split(base, "train", base.train_size)
    eval_size = base.val_size if (eval_split == "val" and base.val_size) else base.train_size
    for labels, config in _cells(axis, base):
        result = train(config, train_samples=train_samples)
        if eval_split == "val" and base.val_size:
            samples = data_mod.gen_split(config, "val", eval_size)
        else:
            samples = train_samples
        report = evaluate(result.model, samples)
        row = dict(labels)
        row["miou"] = round(report.miou, 6)
        for t, col in zip(THRESHOLDS, _PR_COLUMNS):
            row[col] = round(report.pr[t], 6)
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def directional_report(base: Config, seeds, quiet: bool = False) -> list[str]:
    """Informational comparison: calibration on/off and recon weight on/off.

    Direction at desk scale is reported, never gated.
    """
    from . import data as data_mod

    lines = []
    for label, variant_a, variant_b in (
        ("cdec on vs off", {"cdec_enabled": True}, {"cdec_enabled": False}),
        ("recon 0.1 vs 0", {"recon_weight": 0.1}, {"recon_weight": 0.0}),
    ):
        deltas = []
        for seed in seeds:
            cfg_a = base.replace(model_seed=seed, **variant_a)
            cfg_b = base.replace(model_seed=seed, **variant_b)
            samples = data_mod.gen_split(cfg_a, "train", cfg_a.train_size)
            miou_a = evaluate(train(cfg_a, train_samples=samples).model, samples).miou
            miou_b = evaluate(train(cfg_b, train_samples=samples).model, samples).miou
            deltas.append(miou_a - miou_b)
        mean = sum(deltas) / len(deltas)
        lines.append(f"informational: {label}: mean miou delta {mean:+.4f} over {len(deltas)} seeds "
                     f"({'favors first' if mean > 0 else 'favors second' if mean < 0 else 'tie'})")
    if not quiet:
        for line in lines:
            print(line)
    return lines

"""Desk-scale experiment pipeline: build the tinted datasets, train, run the probe battery."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import pseudo_label_accuracy
from .config import ExperimentConfig, stream_seed
from .datagen import MultiDomainDataset, cached_colored_shapes, make_colored_shapes
from .evaluation import ProbeResult, ProbeSettings, probe_encoder, split_dataset
from .trainer import Trainer

PROBE_BATTERY = (
    ("class", "full"),
    ("class", "prefix"),
    ("class", "remainder"),
    ("domain", "full"),
    ("domain", "prefix"),
    ("domain", "remainder"),
)


@dataclass
class DeskData:
    train: MultiDomainDataset
    test: MultiDomainDataset
    unseen: MultiDomainDataset


def build_data(cfg: ExperimentConfig) -> DeskData:
    """Train/test sets over the training palette and a set over the unseen palette.

    Each split is drawn independently from its own stream of the root seed.
    """
    d = cfg.data

    def make(n, palette, name):
        seed = stream_seed(cfg.seed, f"data/{name}") % 2**31
        if d.cache_dir is not None:
            return cached_colored_shapes(d.cache_dir, n, palette, seed, size=d.image_size, n_classes=d.n_classes)
        return make_colored_shapes(n, palette, seed, d.image_size, d.n_classes)

    return DeskData(
        make(d.n_train, d.palette, "train"),
        make(d.n_test, d.palette, "test"),
        make(d.n_test, d.unseen_palette, "unseen"),
    )


def probe_settings(cfg: ExperimentConfig) -> ProbeSettings:
    return ProbeSettings(cfg.eval.probe_C, cfg.eval.probe_max_iter, stream_seed(cfg.seed, "probe") % 2**31)


def probe_battery(trainer: Trainer, data: DeskData, probes=PROBE_BATTERY) -> list[ProbeResult]:
    """Class and domain probes on every slice, fitted on train and scored on test."""
    settings = probe_settings(trainer.cfg)
    cache: dict = {}
    return [
        probe_encoder(trainer.encoder, trainer.spec.k, data.train, data.test, t, s, "train-domain", settings, cache)
        for t, s in probes
    ]


def unseen_probe(trainer: Trainer, data: DeskData, slice: str = "auto") -> ProbeResult:
    """Class probe on the never-seen palette (remainder for DDM, full otherwise under ``auto``)."""
    if slice == "auto":
        slice = "remainder" if trainer.is_ddm else "full"
    settings = probe_settings(trainer.cfg)
    tr, te = split_dataset(data.unseen, trainer.cfg.eval.unseen_fraction_train, settings.seed)
    return probe_encoder(trainer.encoder, trainer.spec.k, tr, te, "class", slice, "unseen-domain", settings)


def run_experiment(cfg: ExperimentConfig, data: DeskData | None = None, out_dir: str | Path | None = None) -> dict:
    """Train one configuration and evaluate it. Returns trainer, probe table, unseen probe."""
    data = build_data(cfg) if data is None else data
    trainer = Trainer(cfg, data.train, out_dir)
    if out_dir is None:
        trainer.metrics.write(trainer.header())
    trainer.fit()
    probes = {f"{r.target}/{r.slice}": r for r in probe_battery(trainer, data)}
    result = {"trainer": trainer, "data": data, "probes": probes, "unseen": unseen_probe(trainer, data)}
    cs = trainer.cluster_state
    if cs is not None and data.train.domain_labels is not None:
        result["pseudo_label_accuracy"] = pseudo_label_accuracy(cs.assignments, data.train.domain_labels, cs.inliers)
    return result


def summary(result: dict) -> dict[str, float]:
    """Flat ``name -> top1`` view of a :func:`run_experiment` result."""
    out = {name: round(r.top1, 2) for name, r in result["probes"].items()}
    out["unseen/" + result["unseen"].slice] = round(result["unseen"].top1, 2)
    return out


def chance(labels) -> float:
    """Accuracy of always predicting the majority label, in percent."""
    counts = np.bincount(np.asarray(labels))
    return 100.0 * counts.max() / counts.sum()

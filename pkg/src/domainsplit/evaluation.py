"""Linear probes on frozen representations and unseen-domain generalization."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .datagen import MultiDomainDataset
from .encoder import encode_dataset, load_checkpoint, load_encoder, slice_features
from .errors import DomainSplitError, InputError

log = logging.getLogger(__name__)


class DomainOverlapError(DomainSplitError):
    """The 'unseen' evaluation domain was part of pretraining."""


@dataclass
class ProbeResult:
    target: str  # class | domain
    slice: str  # full | prefix | remainder
    split: str  # train-domain | unseen-domain
    top1: float
    n: int
    per_domain: dict = field(default_factory=dict)  # name -> {"top1": float, "n": int}
    excluded: int = 0

    def to_record(self) -> dict:
        return {"kind": "probe", **asdict(self)}


@dataclass(frozen=True)
class ProbeSettings:
    C: float = 1.0
    max_iter: int = 2000
    seed: int = 0


def _fit_predict(X_tr, y_tr, X_te, settings: ProbeSettings) -> np.ndarray:
    scaler = StandardScaler().fit(X_tr)
    if len(np.unique(y_tr)) == 1:
        return np.full(len(X_te), y_tr[0])
    clf = LogisticRegression(C=settings.C, max_iter=settings.max_iter, random_state=settings.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(scaler.transform(X_tr), y_tr)
    return clf.predict(scaler.transform(X_te))


def linear_probe(
    train_features,
    train_labels,
    test_features,
    test_labels,
    test_domains=None,
    domain_names: list[str] | None = None,
    target: str = "class",
    slice: str = "full",
    split: str = "train-domain",
    settings: ProbeSettings = ProbeSettings(),
) -> ProbeResult:
    """Multinomial logistic regression (L-BFGS, standardized inputs) on frozen features.

    Test samples whose label never occurs in the probe's training split are
    dropped from the accuracy and counted in ``excluded``.
    """
    X_tr = np.asarray(train_features, dtype=np.float64)
    X_te = np.asarray(test_features, dtype=np.float64)
    y_tr = np.asarray(train_labels)
    y_te = np.asarray(test_labels)
    if X_tr.ndim != 2 or X_te.ndim != 2 or X_tr.shape[1] != X_te.shape[1]:
        raise InputError("probe features must be 2-D with matching widths")
    if len(X_tr) != len(y_tr) or len(X_te) != len(y_te):
        raise InputError("one label per feature row required")
    seen = np.isin(y_te, np.unique(y_tr))
    excluded = int((~seen).sum())
    if excluded:
        warnings.warn(f"{excluded} test samples have labels absent from probe training; excluded", stacklevel=2)
    X_te, y_te = X_te[seen], y_te[seen]
    dom = None if test_domains is None else np.asarray(test_domains)[seen]
    pred = _fit_predict(X_tr, y_tr, X_te, settings)
    correct = pred == y_te
    per_domain = {}
    if dom is not None:
        for d in np.unique(dom):
            sel = dom == d
            name = domain_names[d] if domain_names and 0 <= d < len(domain_names) else str(int(d))
            per_domain[name] = {"top1": 100.0 * float(correct[sel].mean()), "n": int(sel.sum())}
    top1 = 100.0 * float(correct.mean()) if len(correct) else float("nan")
    return ProbeResult(target, slice, split, top1, int(len(correct)), per_domain, excluded)


def domain_probe(train_features, train_domains, test_features, test_domains, **kw) -> ProbeResult:
    """Linear probe whose target is the domain label."""
    return linear_probe(
        train_features, train_domains, test_features, test_domains, test_domains=test_domains, target="domain", **kw
    )


def weighted_average(per_domain: dict) -> float:
    n = sum(v["n"] for v in per_domain.values())
    return sum(v["top1"] * v["n"] for v in per_domain.values()) / n


def features_for(encoder, ds: MultiDomainDataset) -> np.ndarray:
    return encode_dataset(encoder, ds.images).double().numpy()


def probe_encoder(
    encoder,
    k: int,
    train: MultiDomainDataset,
    test: MultiDomainDataset,
    target: str = "class",
    slice: str = "full",
    split: str = "train-domain",
    settings: ProbeSettings = ProbeSettings(),
    cache: dict | None = None,
) -> ProbeResult:
    """Encode both splits in eval mode and probe the requested slice.

    ``cache`` (a dict) lets several probes share one encoding pass.
    """
    if cache is None:
        cache = {}
    if "train" not in cache:
        cache["train"] = features_for(encoder, train)
        cache["test"] = features_for(encoder, test)
    f_tr = slice_features(cache["train"], k, slice)
    f_te = slice_features(cache["test"], k, slice)
    if target == "class":
        y_tr, y_te = train.class_labels, test.class_labels
    elif target == "domain":
        if train.domain_labels is None or test.domain_labels is None:
            raise InputError("domain probe needs domain labels")
        y_tr, y_te = train.domain_labels, test.domain_labels
    else:
        raise InputError(f"unknown probe target {target!r}")
    return linear_probe(
        f_tr,
        y_tr,
        f_te,
        y_te,
        test_domains=test.domain_labels,
        domain_names=test.domain_names,
        target=target,
        slice=slice,
        split=split,
        settings=settings,
    )


def split_dataset(ds: MultiDomainDataset, train_fraction: float, seed: int):
    """Seeded random split into (train, test) subsets."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))


def check_unseen(pretrain_provenance: dict, unseen: MultiDomainDataset):
    """Raise DomainOverlapError if any tint of ``unseen`` was used in pretraining."""
    seen = set(pretrain_provenance.get("palette", []))
    overlap = seen & set(unseen.domain_names)
    if overlap:
        raise DomainOverlapError(f"unseen-domain set shares domains with pretraining: {sorted(overlap)}")


def generalization_eval(
    checkpoint,
    unseen: MultiDomainDataset,
    slice: str = "auto",
    train_fraction: float = 0.5,
    settings: ProbeSettings = ProbeSettings(),
) -> ProbeResult:
    """Class probe trained and tested on splits of a domain never seen in pretraining.

    ``checkpoint`` is a path or a loaded checkpoint dict. ``slice="auto"`` probes the
    invariant remainder of a DDM model and the full representation of a plain baseline.
    """
    payload = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    provenance = json.loads(payload.get("dataset", "{}"))
    check_unseen(provenance, unseen)
    encoder, spec = load_encoder(payload)
    if slice == "auto":
        slice = "remainder" if payload.get("method") == "ddm" else "full"
    train, test = split_dataset(unseen, train_fraction, settings.seed)
    return probe_encoder(encoder, spec.k, train, test, "class", slice, "unseen-domain", settings)


def write_probe_table(rows: dict[str, dict[str, float]], path: str | Path, header: dict | None = None) -> Path:
    """CSV with one row per model and one column per domain, plus their average.

    ``header`` entries are written as leading ``# key: value`` comment lines.
    """
    path = Path(path)
    columns: list[str] = []
    for values in rows.values():
        for c in values:
            if c not in columns:
                columns.append(c)
    with open(path, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}: {value}\n")
        writer = csv.writer(fh)
        writer.writerow(["model", *columns, "average"])
        for model, values in rows.items():
            cells = [values.get(c) for c in columns]
            present = [v for v in cells if v is not None]
            avg = sum(present) / len(present) if present else None
            writer.writerow([model, *("" if v is None else f"{v:.2f}" for v in cells), "" if avg is None else f"{avg:.2f}"])
    return path

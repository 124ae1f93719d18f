"""Representation structure: per-(domain, class) mean heatmaps, activating features, embedding export.

Per cell (domain, class) the mean representation is L2-normalized row-wise. A feature
is *activating* for a row when that row deviates from the feature's across-row mean
by more than ``deviation_threshold`` standard deviations.
"""

from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError

EMBEDDING_FORMAT = "domainsplit-embeddings"
EMBEDDING_VERSION = 1
NORM_EPS = 1e-12


@dataclass
class FeatureActivationReport:
    rows: np.ndarray  # (cells, r), unit L2 norm
    cells: list[tuple[int, int]]  # (domain, class) per row
    k: int | None = None  # prefix width, needed for slice-restricted queries

    @classmethod
    def from_rows(cls, rows, cells, k: int | None = None) -> "FeatureActivationReport":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or len(rows) != len(cells):
            raise InputError("one (domain, class) cell per row required")
        return cls(rows, [(int(d), int(c)) for d, c in cells], k)

    @property
    def domains(self) -> list[int]:
        return sorted({d for d, _ in self.cells})

    @property
    def classes(self) -> list[int]:
        return sorted({c for _, c in self.cells})

    def deviation_scores(self) -> np.ndarray:
        """|row - column mean| / column std; zero where a column is constant."""
        mu = self.rows.mean(0)
        sd = self.rows.std(0)
        dev = np.abs(self.rows - mu)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(sd > 0, dev / np.where(sd > 0, sd, 1.0), 0.0)
        return z

    def feature_range(self, slice: str) -> range:
        r = self.rows.shape[1]
        if slice == "full":
            return range(r)
        if self.k is None:
            raise InputError("report has no prefix width; only slice='full' is available")
        if slice == "prefix":
            return range(self.k)
        if slice == "remainder":
            return range(self.k, r)
        raise InputError(f"unknown slice {slice!r}")


def class_domain_means(representations, class_labels, domain_labels, k: int | None = None) -> FeatureActivationReport:
    """Mean representation of every non-empty (domain, class) cell, each row L2-normalized.

    Rows are ordered by domain, then class. Empty cells are skipped with a warning.
    """
    X = np.asarray(representations, dtype=np.float64)
    y = np.asarray(class_labels)
    d = np.asarray(domain_labels)
    if X.ndim != 2 or len(X) != len(y) or len(X) != len(d):
        raise InputError("representations must be (N, r) with one class and domain label per row")
    rows, cells, missing = [], [], []
    for dom, cls in itertools.product(np.unique(d), np.unique(y)):
        sel = (d == dom) & (y == cls)
        if not sel.any():
            missing.append((int(dom), int(cls)))
            continue
        m = X[sel].mean(0)
        rows.append(m / max(np.linalg.norm(m), NORM_EPS))
        cells.append((int(dom), int(cls)))
    if missing:
        warnings.warn(f"empty (domain, class) cells omitted: {missing}", stacklevel=2)
    return FeatureActivationReport(np.stack(rows), cells, k)


def _check_threshold(t: float):
    if not t > 0:
        raise ConfigError("deviation_threshold must be > 0")


def activating_sets(report: FeatureActivationReport, deviation_threshold: float = 1.5, slice: str = "full") -> dict:
    """Per cell, the set of activating feature indices within ``slice``."""
    _check_threshold(deviation_threshold)
    z = report.deviation_scores()
    allowed = report.feature_range(slice)
    out = {}
    for row, cell in zip(z, report.cells):
        out[cell] = {int(i) for i in np.flatnonzero(row > deviation_threshold) if i in allowed}
    return out


def most_activating_features(report: FeatureActivationReport, deviation_threshold: float = 1.5) -> np.ndarray:
    """Sorted indices of features on which at least one row deviates by more than the threshold."""
    _check_threshold(deviation_threshold)
    z = report.deviation_scores()
    return np.flatnonzero((z > deviation_threshold).any(0))


def jaccard(a: set, b: set) -> float:
    """|a & b| / |a | b|; two empty sets count as identical."""
    union = a | b
    return 1.0 if not union else len(a & b) / len(union)


def overlap_from_sets(sets: dict) -> float:
    """Mean over classes and domain pairs of the Jaccard overlap of activating-feature sets."""
    domains = sorted({d for d, _ in sets})
    if len(domains) < 2:
        raise InputError("overlap needs at least two domains")
    scores = []
    for a, b in itertools.combinations(domains, 2):
        for cls in sorted({c for _, c in sets}):
            if (a, cls) in sets and (b, cls) in sets:
                scores.append(jaccard(sets[(a, cls)], sets[(b, cls)]))
    if not scores:
        raise InputError("no class is present in two domains")
    return float(np.mean(scores))


def domain_overlap_score(report: FeatureActivationReport, slice: str = "full", deviation_threshold: float = 1.5) -> float:
    """Cross-domain Jaccard overlap of per-class activating features on ``slice``, in [0, 1]."""
    return overlap_from_sets(activating_sets(report, deviation_threshold, slice))


def write_heatmap_csv(report: FeatureActivationReport, path, indices=None, header: dict | None = None) -> Path:
    """Rows = (domain, class) cells, columns = the selected feature indices."""
    path = Path(path)
    idx = most_activating_features(report) if indices is None else np.asarray(indices, dtype=int)
    with open(path, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh)
        w.writerow(["domain", "class", *(f"f{i}" for i in idx)])
        for (dom, cls), row in zip(report.cells, report.rows):
            w.writerow([dom, cls, *(repr(float(v)) for v in row[idx])])
    return path


def export_embeddings(
    representations,
    class_labels,
    domain_labels,
    path,
    slice: str = "full",
    k: int | None = None,
    ids=None,
    header: dict | None = None,
) -> Path:
    """Write a versioned columnar CSV: ``id, class, domain, v0 .. v{w-1}``.

    Values are written as shortest round-trip decimal strings, so reloading with
    :func:`load_embeddings` reproduces the exported array bit for bit. Missing
    domain labels are written as ``-1``.
    """
    X = np.asarray(representations)
    if X.ndim != 2:
        raise InputError("representations must be 2-D")
    n, r = X.shape
    if slice == "prefix":
        X = X[:, :k]
    elif slice == "remainder":
        X = X[:, k:]
    elif slice != "full":
        raise InputError(f"unknown slice {slice!r}")
    if slice != "full" and (k is None or not 0 < k < r):
        raise InputError("slice export needs 0 < k < r")
    y = np.asarray(class_labels)
    d = np.full(n, -1) if domain_labels is None else np.asarray(domain_labels)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    if not len(y) == len(d) == len(ids) == n:
        raise InputError("one id, class and domain label per row required")
    path = Path(path)
    meta = {"format": EMBEDDING_FORMAT, "version": EMBEDDING_VERSION, "dtype": str(X.dtype), "slice": slice, "rows": n}
    meta.update(header or {})
    with open(path, "w", newline="") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh)
        w.writerow(["id", "class", "domain", *(f"v{j}" for j in range(X.shape[1]))])
        for i in range(n):
            w.writerow([int(ids[i]), int(y[i]), int(d[i]), *(repr(float(v)) for v in X[i])])
    return path


def load_embeddings(path) -> dict:
    """Inverse of :func:`export_embeddings`: ``{"header", "ids", "class", "domain", "vectors"}``."""
    header: dict[str, str] = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body_start = 0
    for body_start, line in enumerate(lines):
        if not line.startswith("# "):
            break
        key, _, value = line[2:].partition(": ")
        header[key] = value
    if header.get("format") != EMBEDDING_FORMAT:
        raise FormatError(f"{path}: not an embedding export")
    if int(header.get("version", -1)) != EMBEDDING_VERSION:
        raise FormatError(f"{path}: unsupported embedding version {header.get('version')}")
    rows = list(csv.reader(lines[body_start + 1 :]))
    if len(rows) != int(header["rows"]):
        raise FormatError(f"{path}: expected {header['rows']} rows, found {len(rows)}")
    table = np.array(rows, dtype=object).reshape(len(rows), -1)
    vectors = np.array([[float(v) for v in row[3:]] for row in rows]).astype(header["dtype"])
    return {
        "header": header,
        "ids": table[:, 0].astype(np.int64),
        "class": table[:, 1].astype(np.int64),
        "domain": table[:, 2].astype(np.int64),
        "vectors": vectors.reshape(len(rows), -1),
    }

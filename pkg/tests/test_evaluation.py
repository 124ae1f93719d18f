import math

import numpy as np
import pytest
import torch

from domainsplit.config import from_dict
from domainsplit.datagen import make_colored_shapes
from domainsplit.encoder import EncoderSpec, build_encoder, param_checksum
from domainsplit.evaluation import (
    DomainOverlapError,
    ProbeSettings,
    domain_probe,
    features_for,
    generalization_eval,
    linear_probe,
    probe_encoder,
    split_dataset,
    weighted_average,
    write_probe_table,
)
from domainsplit.errors import InputError
from domainsplit.trainer import fit

SPEC = EncoderSpec(r=16, k=4, widths=(4, 8, 8, 8), seed=3)


@pytest.fixture(scope="module")
def shapes():
    return make_colored_shapes(200, ("red", "green"), seed=9)


def test_one_hot_features_give_perfect_probe():
    y = np.arange(100) % 5
    X = np.eye(5)[y]
    res = linear_probe(X, y, X, y)
    assert res.top1 == 100.0 and res.n == 100


def test_noise_features_sit_at_chance():
    g = np.random.default_rng(0)
    C, n = 4, 4000
    y_tr, y_te = np.arange(n) % C, np.arange(n) % C
    res = linear_probe(g.normal(size=(n, 8)), y_tr, g.normal(size=(n, 8)), y_te)
    p = 1 / C
    sigma = 100 * math.sqrt(p * (1 - p) / n)
    assert abs(res.top1 - 100 * p) <= 3 * sigma


def test_random_encoder_remainder_uninformative_of_unrelated_domains(shapes):
    enc = build_encoder(SPEC)
    labels = np.random.default_rng(1).integers(0, 2, len(shapes))
    feats = features_for(enc, shapes)[:, SPEC.k :]
    res = domain_probe(feats[:100], labels[:100], feats[100:], labels[100:])
    assert abs(res.top1 - 50) <= 3 * 100 * math.sqrt(0.25 / 100)


def test_absent_class_excluded_with_warning():
    X = np.eye(3)
    with pytest.warns(UserWarning, match="excluded"):
        res = linear_probe(X[:2], [0, 1], X, [0, 1, 2])
    assert res.excluded == 1 and res.n == 2


def test_per_domain_average_is_exact():
    g = np.random.default_rng(0)
    X, y, d = g.normal(size=(300, 4)), g.integers(0, 3, 300), g.integers(0, 3, 300)
    res = linear_probe(X[:150], y[:150], X[150:], y[150:], test_domains=d[150:], domain_names=["r", "g", "b"])
    assert set(res.per_domain) == {"r", "g", "b"}
    assert weighted_average(res.per_domain) == pytest.approx(res.top1, abs=1e-9)
    assert 0 <= res.top1 <= 100


def test_probe_is_deterministic_and_leaves_encoder_alone(shapes):
    enc = build_encoder(SPEC)
    before = param_checksum(enc)
    tr, te = split_dataset(shapes, 0.5, 0)
    a = probe_encoder(enc, SPEC.k, tr, te, "class", "remainder")
    b = probe_encoder(enc, SPEC.k, tr, te, "class", "remainder")
    assert a == b
    assert param_checksum(enc) == before
    assert enc.training


@pytest.mark.parametrize("slice,width", [("full", 16), ("prefix", 4), ("remainder", 12)])
def test_slice_isolation(shapes, slice, width, monkeypatch):
    import domainsplit.evaluation as ev

    seen = {}
    real = ev.linear_probe

    def spy(f_tr, *a, **kw):
        seen["width"] = np.asarray(f_tr).shape[1]
        return real(f_tr, *a, **kw)

    monkeypatch.setattr(ev, "linear_probe", spy)
    tr, te = split_dataset(shapes, 0.5, 0)
    probe_encoder(build_encoder(SPEC), SPEC.k, tr, te, "domain", slice)
    assert seen["width"] == width


def test_bad_probe_inputs():
    with pytest.raises(InputError):
        linear_probe(np.zeros((3, 2)), [0, 1, 0], np.zeros((3, 3)), [0, 1, 0])
    with pytest.raises(InputError):
        linear_probe(np.zeros((3, 2)), [0, 1], np.zeros((3, 2)), [0, 1, 0])


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, shapes):
    out = tmp_path_factory.mktemp("run")
    cfg = from_dict(
        {
            "encoder": {"r": 16, "k": 4, "widths": [4, 8, 8, 8]},
            "ddm": {"critic_hidden": [16]},
            "train": {"epochs": 1, "batch_size": 50},
        }
    )
    fit(cfg, shapes, out)
    return out / "final.pt"


def test_generalization_eval_repeatable(checkpoint):
    unseen = make_colored_shapes(120, ("blue",), seed=4)
    a = generalization_eval(checkpoint, unseen)
    b = generalization_eval(checkpoint, unseen)
    assert a == b
    assert a.split == "unseen-domain" and a.slice == "remainder" and a.n == 60


def test_generalization_eval_refuses_seen_domain(checkpoint):
    with pytest.raises(DomainOverlapError):
        generalization_eval(checkpoint, make_colored_shapes(40, ("green",), seed=4))


def test_probe_table_layout(tmp_path):
    path = write_probe_table(
        {"simclr": {"red": 80.0, "green": 70.0}, "simclr+ddm": {"red": 85.0, "green": 75.0, "blue": 60.0}},
        tmp_path / "t.csv",
        header={"config_hash": "h", "seed": 0},
    )
    lines = path.read_text().splitlines()
    assert lines[:2] == ["# config_hash: h", "# seed: 0"]
    assert lines[2] == "model,red,green,blue,average"
    assert lines[3] == "simclr,80.00,70.00,,75.00"
    assert lines[4] == "simclr+ddm,85.00,75.00,60.00,73.33"


def test_probe_settings_are_paired():
    s = ProbeSettings()
    assert (s.C, s.max_iter) == (1.0, 2000)

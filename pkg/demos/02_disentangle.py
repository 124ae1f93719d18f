"""
Splitting the representation into domain and content
=====================================================

Train the same encoder twice on the red/green shapes: once with plain SimCLR
on the full representation, once with the disentanglement terms. The first
few features (the prefix) are pulled toward domain identity, while a critic
tries to read the domain from the rest (the remainder) and the encoder tries
to stop it. Linear probes then show where the domain and the class live.

Pass the number of epochs as the first argument (default 10; the acceptance
suite uses 50).
"""

import sys

import torch

from domainsplit.config import from_dict
from domainsplit.diagnostics import class_domain_means, domain_overlap_score
from domainsplit.encoder import encode_dataset
from domainsplit.experiments import build_data, run_experiment, summary

torch.set_num_threads(1)
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10

# %%
# Both runs share the root seed, so they see identical data, views and
# initial encoder weights.
base_cfg = from_dict({"method": "baseline", "train": {"epochs": epochs}})
ddm_cfg = from_dict({"method": "ddm", "train": {"epochs": epochs}})
data = build_data(ddm_cfg)

runs = {}
for name, cfg in (("simclr", base_cfg), ("simclr+ddm", ddm_cfg)):
    runs[name] = run_experiment(cfg, data)
    print(f"{name}: trained {epochs} epochs")

# %%
# Probe table: rows are runs, columns are (target / slice). Chance is 10 for
# class and 50 for domain.
cols = ["class/full", "class/remainder", "class/prefix", "domain/prefix", "domain/remainder"]
print(f"{'run':<12}" + "".join(f"{c:>18}" for c in cols))
for name, res in runs.items():
    s = summary(res)
    print(f"{name:<12}" + "".join(f"{s[c]:>18.2f}" for c in cols))

# %%
# Training curves of the domain terms: d_var should saturate near its ceiling
# (the prefix separates domains), d_invar is the critic's margin.
for rec in runs["simclr+ddm"]["trainer"].metrics.of_kind("epoch")[:: max(1, epochs // 5)]:
    print(f"epoch {rec['epoch']:>3}  ssl {rec['mean_ssl']:.3f}  d_var {rec['mean_d_var']:.3f}  d_invar {rec['mean_d_invar']:+.3f}")

# %%
# Activating features per (domain, class) cell. Overlap near 1 means the two
# domains light up the same features for a class.
for name, res in runs.items():
    tr = res["trainer"]
    reps = encode_dataset(tr.encoder, data.test.images).double().numpy()
    report = class_domain_means(reps, data.test.class_labels, data.test.domain_labels, k=tr.spec.k)
    scores = {s: round(domain_overlap_score(report, s), 3) for s in ("full", "prefix", "remainder")}
    print(f"{name:<12} cross-domain overlap {scores}")

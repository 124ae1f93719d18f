"""
Plotting exported embeddings
============================

Read a file written by ``domainsplit export-embeddings`` and draw a 2-D t-SNE
map colored by class, with marker shape for domain. Requires matplotlib.

    domainsplit export-embeddings --checkpoint runs/default/final.pt --slice remainder
    python demos/05_plot_embeddings.py runs/default/embeddings_test_remainder.csv
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from sklearn.manifold import TSNE  # noqa: E402

from domainsplit.diagnostics import load_embeddings  # noqa: E402

path = Path(sys.argv[1])
emb = load_embeddings(path)
xy = TSNE(n_components=2, init="pca", random_state=0).fit_transform(emb["vectors"])

fig, ax = plt.subplots(figsize=(6, 6))
names = emb["header"].get("domains", "").split(",")
for d, marker in zip(sorted(set(emb["domain"].tolist())), "os^D"):
    sel = emb["domain"] == d
    label = names[d] if 0 <= d < len(names) else str(d)
    ax.scatter(*xy[sel].T, c=emb["class"][sel], cmap="tab10", marker=marker, s=10, label=label, vmin=0, vmax=9)
ax.legend(title="domain")
ax.set_title(f"{emb['header']['slice']} slice, {len(xy)} samples")
out = path.with_suffix(".png")
fig.savefig(out, dpi=120, bbox_inches="tight")
print("wrote", out)

"""
Tinted shapes: a two-domain toy world
======================================

Every image is a grayscale shape multiplied by one RGB tint. The shape decides
the class, the tint decides the domain. Nothing about the tint predicts the
class, so a representation that spends capacity on color is wasting it.
"""

import numpy as np
import torch

from domainsplit.datagen import AugmentRecipe, TINTS, augment_views, make_colored_shapes

# %%
# Build 2000 samples tinted red or green, and a held-out set in blue.
train = make_colored_shapes(2000, ["red", "green"], seed=1)
unseen = make_colored_shapes(500, ["blue"], seed=2)
print(train.images.shape, train.num_classes, "classes,", train.num_domains, "domains:", train.domain_names)

# %%
# The tints are plain channel multipliers.
for name in ("red", "green", "blue"):
    print(f"{name:>5}: {TINTS[name]}")

# %%
# Class balance is the same in both domains: tint carries no class signal.
for d, name in enumerate(train.domain_names):
    counts = np.bincount(train.class_labels[train.domain_labels == d], minlength=train.num_classes)
    print(f"{name:>5} class counts: {counts.tolist()}")

# %%
# Mean channel intensity separates the domains perfectly. This is the shortcut
# a contrastive learner can latch onto when its negatives come in two colors.
mean_rgb = train.images.mean(axis=(1, 2))
for d, name in enumerate(train.domain_names):
    print(f"{name:>5} mean RGB: {mean_rgb[train.domain_labels == d].mean(0).round(3)}")

# %%
# Two augmented views per sample. Crops and flips vary; the tint is kept so
# both views share their domain.
recipe = AugmentRecipe()
a, b = augment_views(train.images[:8], np.arange(8), recipe, seed=0, epoch=0)
print("views:", tuple(a.shape), "same tint kept:", torch.allclose(a.mean((2, 3)).argmax(1).float(), b.mean((2, 3)).argmax(1).float()))

# %%
# Views are a pure function of (seed, epoch, sample id).
a2, _ = augment_views(train.images[:8], np.arange(8), recipe, seed=0, epoch=0)
print("repeatable:", torch.equal(a, a2))
print("unseen domain:", unseen.domain_names, len(unseen), "samples")

"""Joint-embedding SSL baselines: losses and the projection/prediction heads that feed them."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError

NORM_EPS = 1e-12


def _check_pair(z_a: torch.Tensor, z_b: torch.Tensor):
    if z_a.ndim != 2 or z_a.shape != z_b.shape:
        raise InputError(f"expected two (N, p) tensors of equal shape, got {tuple(z_a.shape)} and {tuple(z_b.shape)}")


def nt_xent(z_a: torch.Tensor, z_b: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """SimCLR normalized-temperature cross entropy, averaged over all 2N anchors.

    Row i of ``z_a`` and row i of ``z_b`` are positives; the other 2N - 2 rows are negatives.
    """
    _check_pair(z_a, z_b)
    n = z_a.shape[0]
    if n < 2:
        raise ConfigError("nt_xent needs N >= 2 so every anchor has a negative")
    if tau <= 0:
        raise ConfigError("tau must be positive")
    z = F.normalize(torch.cat([z_a, z_b]), dim=1, eps=NORM_EPS)
    logits = z @ z.T / tau
    logits = logits.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(n)])
    return F.cross_entropy(logits, targets)


def negative_cosine(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Mean of -cos(p_i, z_i) with z detached."""
    p = F.normalize(p, dim=1, eps=NORM_EPS)
    z = F.normalize(z.detach(), dim=1, eps=NORM_EPS)
    return -(p * z).sum(dim=1).mean()


def simsiam_loss(p_a: torch.Tensor, z_b: torch.Tensor, p_b: torch.Tensor, z_a: torch.Tensor) -> torch.Tensor:
    """Symmetrized SimSiam loss; the projections ``z_*`` receive no gradient."""
    _check_pair(p_a, z_b)
    _check_pair(p_b, z_a)
    return 0.5 * negative_cosine(p_a, z_b) + 0.5 * negative_cosine(p_b, z_a)


def _standardize(z: torch.Tensor) -> torch.Tensor:
    mean = z.mean(dim=0, keepdim=True)
    std = z.var(dim=0, unbiased=False, keepdim=True).sqrt().clamp_min(NORM_EPS)
    return (z - mean) / std


def barlow_twins_loss(z_a: torch.Tensor, z_b: torch.Tensor, lambda_off: float = 5e-3) -> torch.Tensor:
    """sum_i (1 - C_ii)^2 + lambda_off * sum_{i != j} C_ij^2 over the batch cross-correlation C."""
    _check_pair(z_a, z_b)
    n = z_a.shape[0]
    if n < 2:
        raise ConfigError("barlow_twins_loss needs N >= 2 to standardize features")
    c = _standardize(z_a).T @ _standardize(z_b) / n
    diag = torch.diagonal(c)
    on = (1 - diag).pow(2).sum()
    off = c.pow(2).sum() - diag.pow(2).sum()
    return on + lambda_off * off


# ---------------------------------------------------------------------------
# heads


def _mlp(d_in: int, d_hidden: int, d_out: int, last_bn: bool = False) -> nn.Sequential:
    layers = [nn.Linear(d_in, d_hidden, bias=False), nn.BatchNorm1d(d_hidden), nn.ReLU(inplace=True), nn.Linear(d_hidden, d_out)]
    if last_bn:
        layers.append(nn.BatchNorm1d(d_out, affine=False))
    return nn.Sequential(*layers)


class SimCLRHead(nn.Module):
    name = "simclr"
    optimizer = {"name": "adam", "lr": 1e-3, "weight_decay": 1e-6}

    def __init__(self, d_in: int, d_hidden: int = 128, d_out: int = 64, tau: float = 0.5):
        super().__init__()
        self.tau = tau
        self.projector = _mlp(d_in, d_hidden, d_out)

    def forward(self, h_a: torch.Tensor, h_b: torch.Tensor) -> torch.Tensor:
        return nt_xent(self.projector(h_a), self.projector(h_b), self.tau)


class SimSiamHead(nn.Module):
    name = "simsiam"
    optimizer = {"name": "sgd", "lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4}

    def __init__(self, d_in: int, d_hidden: int = 128, d_out: int = 64):
        super().__init__()
        self.projector = _mlp(d_in, d_hidden, d_out, last_bn=True)
        self.predictor = _mlp(d_out, d_hidden // 2, d_out)

    def forward(self, h_a: torch.Tensor, h_b: torch.Tensor) -> torch.Tensor:
        z_a, z_b = self.projector(h_a), self.projector(h_b)
        return simsiam_loss(self.predictor(z_a), z_b, self.predictor(z_b), z_a)


class BarlowTwinsHead(nn.Module):
    name = "barlow_twins"
    optimizer = {"name": "adam", "lr": 1e-3, "weight_decay": 1e-6}

    def __init__(self, d_in: int, d_hidden: int = 128, d_out: int = 128, lambda_off: float = 5e-3):
        super().__init__()
        self.lambda_off = lambda_off
        self.projector = _mlp(d_in, d_hidden, d_out)

    def forward(self, h_a: torch.Tensor, h_b: torch.Tensor) -> torch.Tensor:
        return barlow_twins_loss(self.projector(h_a), self.projector(h_b), self.lambda_off)


BASELINES: dict[str, type[nn.Module]] = {
    "simclr": SimCLRHead,
    "simsiam": SimSiamHead,
    "barlow_twins": BarlowTwinsHead,
}


def build_head(baseline: str, d_in: int, seed: int, **kw) -> nn.Module:
    try:
        cls = BASELINES[baseline]
    except KeyError:
        raise ConfigError(f"unknown baseline {baseline!r}; expected one of {sorted(BASELINES)}") from None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return cls(d_in, **kw)

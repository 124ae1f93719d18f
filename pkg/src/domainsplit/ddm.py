"""Domain disentanglement losses.

The representation is split into a domain prefix (first k features) and an
invariant remainder. Two extra terms act on it:

* ``loss_domain_variant``: a supervised-contrastive log-ratio that pulls same-domain
  prefixes together and pushes cross-domain prefixes apart (higher is better).
* ``loss_domain_invariant``: the Wasserstein dual margin
  ``D(h_p, y) - D(h_p, y_rand)`` of a domain-conditioned critic. The critic ascends
  it (with a gradient penalty); the encoder descends it.

The encoder minimizes ``l_ssl - lambda_var * l_d_var + lambda_invar * l_d_invar``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BatchCompositionWarning, ConfigError, InputError

NORM_EPS = 1e-12
CRITIC_INPUTS = ("raw", "normalized")


@dataclass(frozen=True)
class DdmConfig:
    lambda_var: float = 0.5
    lambda_invar: float = 0.5
    tau: float = 0.5
    gp_weight: float = 10.0
    critic_steps: int = 1
    critic_lr: float = 0.005
    critic_hidden: tuple[int, ...] = (128, 128)
    leaky_slope: float = 0.2
    critic_input: str = "raw"  # raw | normalized (rows L2-normalized before the critic)

    def __post_init__(self):
        if self.lambda_var < 0 or self.lambda_invar < 0:
            raise ConfigError("lambda_var and lambda_invar must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.gp_weight < 0:
            raise ConfigError("gp_weight must be >= 0")
        if self.critic_steps < 1:
            raise ConfigError("critic_steps must be a positive integer")
        if self.critic_lr < 0:
            raise ConfigError("critic_lr must be >= 0")
        if self.critic_input not in CRITIC_INPUTS:
            raise ConfigError(f"critic_input must be one of {CRITIC_INPUTS}")


def _cosine_matrix(x: torch.Tensor) -> torch.Tensor:
    x = F.normalize(x, dim=-1, eps=NORM_EPS)
    return x @ x.T


def sim(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    """exp(cos(a, b) / tau)."""
    if tau <= 0:
        raise ConfigError("tau must be > 0")
    cos = (F.normalize(a, dim=-1, eps=NORM_EPS) * F.normalize(b, dim=-1, eps=NORM_EPS)).sum(-1)
    return torch.exp(cos / tau)


def loss_domain_variant(
    prefixes: torch.Tensor,
    domain_labels: torch.Tensor,
    tau: float = 0.5,
    reduction: str = "sum",
) -> torch.Tensor:
    """Per anchor i: log( sum_{j != i, y_j = y_i} sim_ij / sum_{y_j != y_i} sim_ij ).

    Anchors without a same-domain partner or without any cross-domain sample are
    skipped and a :class:`BatchCompositionWarning` is issued. ``reduction`` is
    ``"sum"`` (over anchors) or ``"mean"`` (over the anchors kept). Returns 0 when
    no anchor qualifies.
    """
    if tau <= 0:
        raise ConfigError("tau must be > 0")
    if prefixes.ndim != 2 or len(domain_labels) != len(prefixes):
        raise InputError("prefixes must be (2N, k) with one label per row")
    labels = torch.as_tensor(domain_labels)
    n = len(labels)
    logits = _cosine_matrix(prefixes) / tau
    eye = torch.eye(n, dtype=torch.bool)
    same = (labels[:, None] == labels[None, :]) & ~eye
    diff = labels[:, None] != labels[None, :]
    valid = same.any(1) & diff.any(1)
    n_valid = int(valid.sum())
    if n_valid < n:
        warnings.warn(
            f"{n - n_valid} of {n} anchors lack a same-domain or cross-domain partner; skipped",
            BatchCompositionWarning,
            stacklevel=2,
        )
    if n_valid == 0:
        return prefixes.sum() * 0.0
    lg = logits[valid]
    neg_inf = torch.tensor(float("-inf"), dtype=lg.dtype)
    log_num = torch.logsumexp(torch.where(same[valid], lg, neg_inf), dim=1)
    log_den = torch.logsumexp(torch.where(diff[valid], lg, neg_inf), dim=1)
    per_anchor = log_num - log_den
    if reduction == "sum":
        return per_anchor.sum()
    if reduction == "mean":
        return per_anchor.mean()
    raise ConfigError(f"unknown reduction {reduction!r}")


def critic_features(h_p: torch.Tensor, mode: str = "raw") -> torch.Tensor:
    """What the critic sees: the remainder as is, or projected onto the unit sphere.

    Under a gradient penalty the critic is 1-Lipschitz, so on raw features the encoder
    can hide the domain gap by shrinking the remainder; normalizing removes that escape.
    """
    if mode == "raw":
        return h_p
    if mode == "normalized":
        return F.normalize(h_p, dim=-1, eps=NORM_EPS)
    raise ConfigError(f"critic_input must be one of {CRITIC_INPUTS}")


class Critic(nn.Module):
    """LeakyReLU MLP with one output per domain; score(h, y) = output[y]."""

    def __init__(self, d_in: int, num_domains: int, hidden: tuple[int, ...] = (128, 128), slope: float = 0.2):
        super().__init__()
        self.num_domains = num_domains
        layers: list[nn.Module] = []
        d = d_in
        for w in hidden:
            layers += [nn.Linear(d, w), nn.LeakyReLU(slope)]
            d = w
        layers.append(nn.Linear(d, num_domains))
        self.net = nn.Sequential(*layers)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h)


def build_critic(d_in: int, num_domains: int, cfg: DdmConfig, seed: int) -> Critic:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Critic(d_in, num_domains, tuple(cfg.critic_hidden), cfg.leaky_slope)


def critic_score(critic: nn.Module, h_p: torch.Tensor, y) -> torch.Tensor:
    """Score of each row of ``h_p`` under its domain head ``y``. Accepts a single vector too."""
    single = h_p.ndim == 1
    h = h_p[None] if single else h_p
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if len(y) == 1 and len(h) > 1:
        y = y.expand(len(h))
    m = critic.num_domains
    if len(y) != len(h):
        raise InputError("one domain label per representation required")
    if bool(((y < 0) | (y >= m)).any()):
        raise InputError(f"domain label out of range [0, {m})")
    out = critic(h).gather(1, y[:, None])[:, 0]
    return out[0] if single else out


class LabelPrior:
    """Empirical domain-label distribution used to draw ``y_rand``."""

    def __init__(self, probs):
        p = torch.as_tensor(np.asarray(probs, dtype=np.float64))
        if p.ndim != 1 or len(p) == 0 or bool((p < 0).any()) or float(p.sum()) <= 0:
            raise ConfigError("label prior must be a non-empty, non-negative vector")
        self.probs = p / p.sum()

    @classmethod
    def from_labels(cls, labels, num_domains: int, mask=None) -> "LabelPrior":
        labels = np.asarray(labels)
        if mask is not None:
            labels = labels[np.asarray(mask, dtype=bool)]
        counts = np.bincount(labels, minlength=num_domains).astype(np.float64)
        if counts.sum() == 0:
            counts[:] = 1.0
        return cls(counts)

    def sample(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        return torch.multinomial(self.probs, n, replacement=True, generator=generator)


def loss_domain_invariant(
    critic: nn.Module,
    h_p: torch.Tensor,
    labels,
    prior: LabelPrior | None = None,
    generator: torch.Generator | None = None,
    y_rand=None,
) -> torch.Tensor:
    """Batch mean of D(h_p, y) - D(h_p, y_rand) with y_rand ~ prior.

    Pass ``y_rand`` to fix the random labels instead of sampling them.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if y_rand is None:
        if prior is None:
            raise ConfigError("either prior or y_rand is required")
        y_rand = prior.sample(len(labels), generator)
    y_rand = torch.as_tensor(y_rand, dtype=torch.long)
    scores = critic(h_p)
    m = critic.num_domains
    for y in (labels, y_rand):
        if bool(((y < 0) | (y >= m)).any()):
            raise InputError(f"domain label out of range [0, {m})")
    true = scores.gather(1, labels[:, None])[:, 0]
    rand = scores.gather(1, y_rand[:, None])[:, 0]
    return (true - rand).mean()


def gradient_penalty(
    critic: nn.Module,
    h_p: torch.Tensor,
    labels,
    generator: torch.Generator | None = None,
    partner=None,
    u=None,
) -> torch.Tensor:
    """Mean over samples of (||grad_h D(h_tilde_i, y_i)||_2 - 1)^2.

    ``h_tilde_i = u_i * h_i + (1 - u_i) * h_partner(i)``, with ``u_i ~ U(0, 1)`` and
    ``partner`` a random permutation of the batch unless given explicitly.
    """
    n = h_p.shape[0]
    if n == 0:
        raise InputError("gradient_penalty needs a non-empty batch")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if partner is None:
        partner = torch.randperm(n, generator=generator)
    if u is None:
        u = torch.rand(n, 1, generator=generator, dtype=h_p.dtype)
    u = torch.as_tensor(u, dtype=h_p.dtype).reshape(n, 1)
    h_tilde = u * h_p + (1 - u) * h_p[torch.as_tensor(partner)]
    if not h_tilde.requires_grad:
        h_tilde = h_tilde.requires_grad_(True)
    scores = critic_score(critic, h_tilde, labels)
    (grad,) = torch.autograd.grad(scores.sum(), h_tilde, create_graph=True)
    return (grad.norm(2, dim=1) - 1).pow(2).mean()


def combined_encoder_objective(l_ssl, l_d_var, l_d_invar, cfg: DdmConfig):
    """l_ssl - lambda_var * l_d_var + lambda_invar * l_d_invar; zero-weight terms are left out entirely."""
    total = l_ssl
    if cfg.lambda_var:
        total = total - cfg.lambda_var * l_d_var
    if cfg.lambda_invar:
        total = total + cfg.lambda_invar * l_d_invar
    return total


def critic_objective(l_d_invar, gp, cfg: DdmConfig):
    """Quantity the critic maximizes: l_d_invar - gp_weight * gp."""
    return l_d_invar - cfg.gp_weight * gp


def cosine_annealed_lr(base_lr: float, step: int, total_steps: int) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total)), clipped to 0 past the end."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))

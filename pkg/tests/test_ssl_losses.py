import math

import numpy as np
import pytest
import torch

from conftest import central_diff
from oracles import barlow_bruteforce, nt_xent_bruteforce
from domainsplit.errors import ConfigError
from domainsplit.ssl_losses import BASELINES, barlow_twins_loss, build_head, nt_xent, simsiam_loss


def test_nt_xent_n2_orthogonal_hand_case(float64):
    za = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    zb = torch.tensor([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    got = float(nt_xent(za, zb, 0.5))
    assert got == pytest.approx(nt_xent_bruteforce(za.numpy(), zb.numpy(), 0.5), rel=1e-6)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_nt_xent_closed_form(float64, n):
    z = torch.eye(2 * n)[:n]  # positives identical, everything else orthogonal
    got = float(nt_xent(z, z.clone(), 1.0))
    assert got == pytest.approx(math.log(1 + (2 * n - 2) * math.exp(-1)), rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_nt_xent_random_matches_bruteforce(float64, seed):
    g = np.random.default_rng(seed)
    za, zb = g.normal(size=(4, 5)), g.normal(size=(4, 5))
    got = float(nt_xent(torch.from_numpy(za), torch.from_numpy(zb), 0.3))
    assert got == pytest.approx(nt_xent_bruteforce(za, zb, 0.3), rel=1e-6)


def test_nt_xent_permutation_invariant(float64):
    za, zb = torch.randn(6, 4), torch.randn(6, 4)
    perm = torch.randperm(6)
    assert float(nt_xent(za, zb)) == pytest.approx(float(nt_xent(za[perm], zb[perm])), rel=1e-12)


def test_nt_xent_needs_negatives():
    with pytest.raises(ConfigError):
        nt_xent(torch.randn(1, 3), torch.randn(1, 3))
    with pytest.raises(ConfigError):
        nt_xent(torch.randn(2, 3), torch.randn(2, 3), tau=0)


def test_nt_xent_decreases_with_positive_similarity(float64):
    za = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    zb = za.clone()
    zb[0] = torch.tensor([0.0, 1.0, 1.0])
    worse = float(nt_xent(za, zb, 0.5))
    zb[0] = torch.tensor([1.0, 1.0, 1.0])
    better = float(nt_xent(za, zb, 0.5))
    assert better < worse


def test_simsiam_extremes(float64):
    p = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    assert float(simsiam_loss(p, p, p, p)) == pytest.approx(-1.0)
    q = torch.tensor([[0.0, 3.0], [1.0, 0.0]])
    assert float(simsiam_loss(p, q, p, q)) == pytest.approx(0.0, abs=1e-15)


def test_simsiam_stopgrad_blocks_gradient(float64):
    p_a = torch.randn(4, 3, requires_grad=True)
    p_b = torch.randn(4, 3, requires_grad=True)
    z_a = torch.randn(4, 3, requires_grad=True)
    z_b = torch.randn(4, 3, requires_grad=True)
    simsiam_loss(p_a, z_b, p_b, z_a).backward()
    assert z_a.grad is None and z_b.grad is None
    assert p_a.grad is not None and float(p_a.grad.abs().sum()) > 0


def test_simsiam_zero_vector_is_finite(float64):
    z = torch.zeros(2, 3)
    assert math.isfinite(float(simsiam_loss(z, z, z, z)))


def test_barlow_identity_correlation_gives_zero(float64):
    # columns are orthogonal +-1 patterns: zero mean, unit variance, uncorrelated
    z = torch.tensor([[1.0, 1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0], [-1.0, -1.0, 1.0]])
    assert float(barlow_twins_loss(z, z.clone(), 5e-3)) == pytest.approx(0.0, abs=1e-24)


def test_barlow_random_fixture_matches_bruteforce(float64):
    g = np.random.default_rng(7)
    za, zb = g.normal(size=(4, 3)), g.normal(size=(4, 3))
    got = float(barlow_twins_loss(torch.from_numpy(za), torch.from_numpy(zb), 0.01))
    assert got == pytest.approx(barlow_bruteforce(za, zb, 0.01), rel=1e-6)


def test_barlow_permutation_and_degenerate(float64):
    za, zb = torch.randn(6, 3), torch.randn(6, 3)
    perm = torch.randperm(6)
    assert float(barlow_twins_loss(za, zb)) == pytest.approx(float(barlow_twins_loss(za[perm], zb[perm])), rel=1e-12)
    const = torch.ones(4, 2)
    assert math.isfinite(float(barlow_twins_loss(const, const)))
    with pytest.raises(ConfigError):
        barlow_twins_loss(torch.randn(1, 3), torch.randn(1, 3))


@pytest.mark.parametrize(
    "loss",
    [
        lambda a, b: nt_xent(a, b, 0.5),
        lambda a, b: barlow_twins_loss(a, b, 0.05),
        lambda a, b: simsiam_loss(a, b, b.flip(0), b),
    ],
    ids=["nt_xent", "barlow", "simsiam"],
)
def test_loss_gradients_match_finite_differences(float64, loss):
    g = torch.Generator().manual_seed(3)
    za = torch.randn(4, 3, generator=g, requires_grad=True)
    zb = torch.randn(4, 3, generator=g)
    (grad,) = torch.autograd.grad(loss(za, zb), za)
    num = central_diff(lambda x: loss(x, zb), za.detach().clone())
    assert torch.allclose(grad, num, rtol=1e-3, atol=1e-7)


@pytest.mark.parametrize("name", sorted(BASELINES))
def test_heads_produce_finite_loss_and_gradients(name):
    head = build_head(name, 12, seed=0)
    h_a, h_b = torch.randn(8, 12, requires_grad=True), torch.randn(8, 12)
    loss = head(h_a, h_b)
    loss.backward()
    assert torch.isfinite(loss) and torch.isfinite(h_a.grad).all()


def test_unknown_baseline():
    with pytest.raises(ConfigError):
        build_head("byol", 4, seed=0)

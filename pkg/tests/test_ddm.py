import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff
from oracles import d_var_bruteforce
from domainsplit.ddm import (
    Critic,
    DdmConfig,
    LabelPrior,
    build_critic,
    combined_encoder_objective,
    cosine_annealed_lr,
    critic_objective,
    critic_score,
    gradient_penalty,
    loss_domain_invariant,
    loss_domain_variant,
    sim,
)
from domainsplit.errors import BatchCompositionWarning, ConfigError, InputError


def linear_critic(W: np.ndarray, b: np.ndarray | None = None) -> Critic:
    m, d = W.shape
    c = Critic(d, m, hidden=())
    with torch.no_grad():
        c.net[0].weight.copy_(torch.as_tensor(W))
        c.net[0].bias.copy_(torch.zeros(m) if b is None else torch.as_tensor(b))
    return c


# -- sim ----------------------------------------------------------------------


def test_sim_examples(float64):
    a = torch.tensor([0.3, -1.2, 2.0])
    assert float(sim(a, a, 0.5)) == pytest.approx(math.e**2, rel=1e-12)
    assert float(sim(a, -a, 1.0)) == pytest.approx(math.exp(-1), rel=1e-12)
    assert float(sim(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 5.0]), 0.7)) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_sim_bounds_and_symmetry(seed, tau):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(5, generator=g, dtype=torch.float64), torch.randn(5, generator=g, dtype=torch.float64)
    s = float(sim(a, b, tau))
    assert math.exp(-1 / tau) * (1 - 1e-12) <= s <= math.exp(1 / tau) * (1 + 1e-12)
    assert s == pytest.approx(float(sim(b, a, tau)), rel=1e-14)


def test_sim_zero_vector_guarded():
    assert float(sim(torch.zeros(3), torch.ones(3), 0.5)) == 1.0


# -- domain-variant prefix loss -----------------------------------------------


def test_d_var_identical_prefixes(float64):
    p = torch.ones(4, 3)
    got = float(loss_domain_variant(p, torch.tensor([0, 0, 1, 1]), tau=0.5))
    assert got == pytest.approx(-4 * math.log(2), rel=1e-12)


def test_d_var_orthogonal_domains(float64):
    p = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    got = float(loss_domain_variant(p, torch.tensor([0, 0, 1, 1]), tau=1.0))
    assert got == pytest.approx(4 * (1 - math.log(2)), rel=1e-12)
    assert float(loss_domain_variant(p, torch.tensor([0, 0, 1, 1]), tau=1.0, reduction="mean")) == pytest.approx(
        1 - math.log(2), rel=1e-12
    )


@pytest.mark.parametrize("seed", range(5))
def test_d_var_matches_bruteforce(float64, seed):
    g = np.random.default_rng(seed)
    n = int(g.integers(4, 9))
    labels = g.integers(0, 3, size=n)
    labels[:2] = [0, 1]
    p = g.normal(size=(n, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BatchCompositionWarning)
        got = float(loss_domain_variant(torch.from_numpy(p), torch.from_numpy(labels), tau=0.4))
    assert got == pytest.approx(d_var_bruteforce(p, labels, 0.4), rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_d_var_permutation_invariance(seed):
    g = np.random.default_rng(seed)
    p = torch.from_numpy(g.normal(size=(8, 4)))
    labels = np.array([0, 0, 1, 1, 2, 2, 0, 1])
    base = float(loss_domain_variant(p, torch.from_numpy(labels)))
    perm = g.permutation(8)
    relabel = g.permutation(3)
    moved = float(loss_domain_variant(p[perm], torch.from_numpy(relabel[labels[perm]])))
    assert moved == pytest.approx(base, rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("c_hi,c_lo", [(0.9, 0.5), (0.5, 0.0), (0.0, -0.7)])
def test_d_var_increases_as_one_cross_pair_separates(float64, c_hi, c_lo):
    # only cos(a0, b1) depends on c; all other pairwise cosines are fixed
    def batch(c):
        s = math.sqrt(1 - c * c)
        return torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0], [c, 0, 0, s]])

    labels = torch.tensor([0, 0, 1, 1])
    hi = float(loss_domain_variant(batch(c_hi), labels))
    lo = float(loss_domain_variant(batch(c_lo), labels))
    assert lo > hi
    assert lo == pytest.approx(d_var_bruteforce(batch(c_lo).numpy(), labels.numpy(), 0.5), rel=1e-9)


def test_d_var_skips_unpaired_anchors(float64):
    p = torch.randn(3, 2)
    with pytest.warns(BatchCompositionWarning):
        got = float(loss_domain_variant(p, torch.tensor([0, 0, 1])))
    assert got == pytest.approx(d_var_bruteforce(p.numpy(), [0, 0, 1], 0.5), rel=1e-9)
    with pytest.warns(BatchCompositionWarning):
        assert float(loss_domain_variant(p, torch.tensor([0, 0, 0]))) == 0.0


def test_d_var_gradient(float64):
    g = torch.Generator().manual_seed(0)
    p = torch.randn(6, 3, generator=g, requires_grad=True)
    labels = torch.tensor([0, 1, 0, 1, 1, 0])
    (grad,) = torch.autograd.grad(loss_domain_variant(p, labels), p)
    num = central_diff(lambda x: loss_domain_variant(x, labels), p.detach().clone())
    assert torch.allclose(grad, num, rtol=1e-3, atol=1e-7)


# -- critic -------------------------------------------------------------------


def test_zero_critic_scores_zero(float64):
    c = linear_critic(np.zeros((3, 4)))
    assert torch.equal(critic_score(c, torch.randn(5, 4), torch.tensor([0, 1, 2, 0, 1])), torch.zeros(5))


def test_linear_critic_matches_dense_multiply(float64):
    g = np.random.default_rng(0)
    W, b, H = g.normal(size=(3, 4)), g.normal(size=3), g.normal(size=(6, 4))
    y = np.array([0, 1, 2, 2, 1, 0])
    c = linear_critic(W, b)
    got = critic_score(c, torch.from_numpy(H), torch.from_numpy(y)).detach().numpy()
    expect = np.array([H[i] @ W[y[i]] + b[y[i]] for i in range(6)])
    assert np.allclose(got, expect, rtol=1e-12)
    single = critic_score(c, torch.from_numpy(H[0]), 1)
    assert float(single.detach()) == pytest.approx(H[0] @ W[1] + b[1])


def test_critic_score_rejects_bad_label(float64):
    c = linear_critic(np.zeros((2, 3)))
    with pytest.raises(InputError):
        critic_score(c, torch.randn(2, 3), torch.tensor([0, 2]))
    with pytest.raises(InputError):
        critic_score(c, torch.randn(2, 3), torch.tensor([-1, 0]))


def test_critic_score_gradient(float64):
    c = build_critic(5, 3, DdmConfig(critic_hidden=(6,)), seed=1).double()
    h = torch.randn(4, 5, requires_grad=True)
    y = torch.tensor([0, 2, 1, 2])
    (grad,) = torch.autograd.grad(critic_score(c, h, y).sum(), h)
    num = central_diff(lambda x: critic_score(c, x, y).sum(), h.detach().clone())
    assert torch.allclose(grad, num, rtol=1e-3, atol=1e-8)


# -- Wasserstein invariance term -------------------------------------------------


def test_d_invar_zero_when_rand_equals_true(float64):
    c = build_critic(4, 3, DdmConfig(), seed=0).double()
    y = torch.tensor([0, 1, 2, 1])
    assert float(loss_domain_invariant(c, torch.randn(4, 4), y, y_rand=y)) == 0.0


def test_d_invar_zero_for_tied_heads(float64):
    W = np.tile(np.random.default_rng(0).normal(size=(1, 4)), (3, 1))
    c = linear_critic(W, np.full(3, 0.7))
    prior = LabelPrior([0.2, 0.3, 0.5])
    g = torch.Generator().manual_seed(0)
    for _ in range(5):
        val = float(loss_domain_invariant(c, torch.randn(6, 4), torch.tensor([0, 1, 2, 0, 1, 2]), prior, g))
        assert val == 0.0


def test_d_invar_hand_enumeration(float64):
    W = np.array([[1.0, -1.0], [0.5, 2.0]])
    b = np.array([0.1, -0.2])
    H = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [-1.0, 1.0]])
    y = np.array([0, 1, 1, 0])
    y_rand = np.array([1, 1, 0, 0])
    # rows: D(h, y) - D(h, y_rand)
    #   0: (1.0 + 0.1) - (0.5 - 0.2)  = 0.8
    #   1: (2.0 - 0.2) - (2.0 - 0.2)  = 0.0
    #   2: (3.0 - 0.2) - (1.0 + 0.1)  = 1.7
    #   3: (-2.0 + 0.1) - (-2.0 + 0.1) = 0.0
    expect = (0.8 + 0.0 + 1.7 + 0.0) / 4
    got = float(loss_domain_invariant(linear_critic(W, b), torch.from_numpy(H), y, y_rand=y_rand))
    assert got == pytest.approx(expect, rel=1e-12)


def test_d_invar_sampled_labels_follow_prior():
    prior = LabelPrior.from_labels(np.array([0] * 30 + [1] * 10), 2)
    draws = prior.sample(20000, torch.Generator().manual_seed(0)).numpy()
    assert abs(draws.mean() - 0.25) < 0.015
    masked = LabelPrior.from_labels(np.array([0, 0, 1, 1]), 2, mask=np.array([True, False, False, False]))
    assert masked.probs.tolist() == [1.0, 0.0]


def test_d_invar_expectation_over_y_rand(float64):
    # E_yrand[L] = mean_i D(h_i, y_i) - sum_m p_m D(h_i, m); checked by exact enumeration over y_rand
    c = build_critic(3, 2, DdmConfig(critic_hidden=(4,)), seed=2).double()
    H = torch.randn(1, 3)
    y = torch.tensor([0])
    p = torch.tensor([0.3, 0.7], dtype=torch.float64)
    exact = sum(float(p[m]) * float(loss_domain_invariant(c, H, y, y_rand=torch.tensor([m]))) for m in range(2))
    scores = c(H)[0]
    assert exact == pytest.approx(float(scores[0] - (p * scores).sum()), rel=1e-12)


def test_d_invar_gradient(float64):
    c = build_critic(4, 3, DdmConfig(critic_hidden=(5,)), seed=0).double()
    h = torch.randn(5, 4, requires_grad=True)
    y, yr = torch.tensor([0, 1, 2, 0, 1]), torch.tensor([2, 2, 0, 1, 1])
    (grad,) = torch.autograd.grad(loss_domain_invariant(c, h, y, y_rand=yr), h)
    num = central_diff(lambda x: loss_domain_invariant(c, x, y, y_rand=yr), h.detach().clone())
    assert torch.allclose(grad, num, rtol=1e-3, atol=1e-8)


# -- gradient penalty -----------------------------------------------------------


def test_gp_zero_for_unit_norm_linear_head(float64):
    W = np.array([[0.6, 0.8, 0.0], [3.0, 0.0, 1.0]])
    c = linear_critic(W)
    h = torch.randn(5, 3)
    gp = gradient_penalty(c, h, torch.zeros(5, dtype=torch.long), torch.Generator().manual_seed(0))
    assert float(gp) == pytest.approx(0.0, abs=1e-24)


def test_gp_zero_critic_is_one(float64):
    c = linear_critic(np.zeros((2, 3)))
    assert float(gradient_penalty(c, torch.randn(4, 3), torch.tensor([0, 1, 0, 1]))) == 1.0


def test_gp_matches_finite_difference_norms(float64):
    c = build_critic(3, 2, DdmConfig(critic_hidden=(6, 6)), seed=4).double()
    g = torch.Generator().manual_seed(1)
    h = torch.randn(5, 3, generator=g)
    y = torch.tensor([0, 1, 1, 0, 1])
    partner = torch.tensor([3, 0, 4, 1, 2])
    u = torch.rand(5, generator=g, dtype=torch.float64)
    got = float(gradient_penalty(c, h, y, partner=partner, u=u))
    pens = []
    for i in range(5):
        ht = (u[i] * h[i] + (1 - u[i]) * h[partner[i]]).clone()
        with torch.no_grad():
            grad = central_diff(lambda x: critic_score(c, x, int(y[i])), ht)
        pens.append((float(grad.norm()) - 1) ** 2)
    assert got == pytest.approx(float(np.mean(pens)), rel=1e-3)


def test_gp_gradient_wrt_critic_weights(float64):
    c = build_critic(3, 2, DdmConfig(critic_hidden=(4,)), seed=5).double()
    h = torch.randn(4, 3)
    y = torch.tensor([0, 1, 0, 1])
    partner, u = torch.tensor([1, 2, 3, 0]), torch.tensor([0.2, 0.5, 0.7, 0.9])
    w = c.net[0].weight
    (grad,) = torch.autograd.grad(gradient_penalty(c, h, y, partner=partner, u=u), w)

    def f(_):
        return gradient_penalty(c, h, y, partner=partner, u=u).detach()

    num = central_diff(f, w.data)
    assert torch.allclose(grad, num, rtol=1e-3, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_gp_nonnegative(seed):
    c = build_critic(4, 3, DdmConfig(critic_hidden=(8,)), seed=seed)
    g = torch.Generator().manual_seed(seed)
    h = torch.randn(6, 4, generator=g)
    y = torch.randint(0, 3, (6,), generator=g)
    assert float(gradient_penalty(c, h, y, g)) >= 0.0


# -- objectives and config ------------------------------------------------------------


def test_combined_objective_reduces_to_ssl():
    cfg = DdmConfig(lambda_var=0.0, lambda_invar=0.0)
    l_ssl = torch.tensor(1.234)
    assert combined_encoder_objective(l_ssl, torch.tensor(5.0), torch.tensor(7.0), cfg) is l_ssl


def test_combined_objective_signs():
    cfg = DdmConfig()
    got = float(combined_encoder_objective(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), cfg))
    assert got == pytest.approx(1.0 - 0.5 * 2.0 + 0.5 * 3.0)
    assert float(critic_objective(torch.tensor(3.0), torch.tensor(0.2), cfg)) == pytest.approx(3.0 - 10 * 0.2)


def test_ddm_defaults_and_validation():
    cfg = DdmConfig()
    assert (cfg.lambda_var, cfg.lambda_invar, cfg.tau, cfg.gp_weight, cfg.critic_steps, cfg.critic_lr) == (
        0.5,
        0.5,
        0.5,
        10.0,
        1,
        0.005,
    )
    for bad in (dict(lambda_var=-1), dict(tau=0), dict(gp_weight=-1), dict(critic_steps=0)):
        with pytest.raises(ConfigError):
            DdmConfig(**bad)


def test_cosine_schedule():
    assert cosine_annealed_lr(0.005, 0, 100) == 0.005
    assert cosine_annealed_lr(0.005, 100, 100) == 0.0
    vals = [cosine_annealed_lr(0.005, s, 100) for s in range(101)]
    assert all(v >= 0 for v in vals)
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_critic_is_leaky_relu_mlp():
    c = build_critic(10, 4, DdmConfig(), seed=0)
    kinds = [type(m).__name__ for m in c.net]
    assert kinds == ["Linear", "LeakyReLU", "Linear", "LeakyReLU", "Linear"]
    assert c(torch.randn(2, 10)).shape == (2, 4)

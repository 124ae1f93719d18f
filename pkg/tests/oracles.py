"""Independent brute-force reference implementations used as test oracles."""

import math

import numpy as np


def nt_xent_bruteforce(za: np.ndarray, zb: np.ndarray, tau: float) -> float:
    """Enumerate every ordered pair of the 2N views."""
    z = np.concatenate([za, zb])
    n2 = len(z)
    n = n2 // 2
    unit = [v / np.linalg.norm(v) for v in z]
    total = 0.0
    for i in range(n2):
        pos = (i + n) % n2
        denom = 0.0
        for j in range(n2):
            if j != i:
                denom += math.exp(float(unit[i] @ unit[j]) / tau)
        total += -math.log(math.exp(float(unit[i] @ unit[pos]) / tau) / denom)
    return total / n2


def barlow_bruteforce(za: np.ndarray, zb: np.ndarray, lam: float) -> float:
    n, d = za.shape

    def std(z):
        out = np.empty_like(z)
        for c in range(d):
            col = z[:, c]
            mu = sum(col) / n
            sd = math.sqrt(sum((v - mu) ** 2 for v in col) / n)
            out[:, c] = (col - mu) / sd
        return out

    a, b = std(za), std(zb)
    loss = 0.0
    for i in range(d):
        for j in range(d):
            cij = sum(a[s, i] * b[s, j] for s in range(n)) / n
            loss += (1 - cij) ** 2 if i == j else lam * cij**2
    return loss


def d_var_bruteforce(prefixes: np.ndarray, labels, tau: float) -> float:
    total = 0.0
    n = len(labels)
    for i in range(n):
        num = den = 0.0
        for j in range(n):
            a, b = prefixes[i], prefixes[j]
            s = math.exp(float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)) / tau)
            if j != i and labels[j] == labels[i]:
                num += s
            if labels[j] != labels[i]:
                den += s
        if num > 0 and den > 0:
            total += math.log(num / den)
    return total


def d_invar_bruteforce(score, H, y, y_rand) -> float:
    """score(h, m) evaluated one sample and one head at a time."""
    return sum(score(H[i], y[i]) - score(H[i], y_rand[i]) for i in range(len(y))) / len(y)


def gp_bruteforce(score, H, y, partner, u, h: float = 1e-6) -> float:
    """Per-sample central-difference gradient norms at the interpolates."""
    total = 0.0
    n, d = H.shape
    for i in range(n):
        x = u[i] * H[i] + (1 - u[i]) * H[partner[i]]
        grad = np.empty(d)
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            grad[j] = (score(x + e, y[i]) - score(x - e, y[i])) / (2 * h)
        total += (math.sqrt(float(grad @ grad)) - 1) ** 2
    return total / n

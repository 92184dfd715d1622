"""t-SNE with perplexity-calibrated affinities, for the reducer comparison.

Standard pipeline: per-point binary search of the Gaussian bandwidth to
hit the requested perplexity, symmetrized joint probabilities, Student-t
low-dimensional kernel, gradient descent with momentum and early
exaggeration. Deterministic per seed.
"""

from __future__ import annotations

import numpy as np

from .common import Embedding

__all__ = ["reduce_tsne", "perplexity_calibration"]

_MACHINE_EPS = np.finfo(np.float64).eps


def _pairwise_sq(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def perplexity_calibration(
    d2: np.ndarray, perplexity: float, tol: float = 1e-5, n_iter: int = 100
) -> np.ndarray:
    """Conditional affinities P(j|i) with per-point precision beta found
    by binary search so that the Shannon entropy matches log(perplexity)."""
    n = d2.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        beta, beta_min, beta_max = 1.0, -np.inf, np.inf
        row = d2[i]
        for _ in range(n_iter):
            p = np.exp(-row * beta)
            p[i] = 0.0
            s = p.sum()
            if s <= 0:
                s = _MACHINE_EPS
            p /= s
            # entropy H = log(s) + beta * sum(d2 * p)
            entropy = -float((p[p > 0] * np.log(p[p > 0])).sum())
            diff = entropy - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if beta_min == -np.inf else (beta + beta_min) / 2.0
        P[i] = p
    return P


def _kl_and_grad(Y: np.ndarray, P: np.ndarray) -> tuple[float, np.ndarray]:
    d2 = _pairwise_sq(Y)
    num = 1.0 / (1.0 + d2)
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), _MACHINE_EPS)
    mask = P > 0
    kl = float((P[mask] * np.log(P[mask] / Q[mask])).sum())
    PQn = (P - Q) * num
    grad = 4.0 * ((np.diag(PQn.sum(axis=1)) - PQn) @ Y)
    return kl, grad


def reduce_tsne(
    X: np.ndarray,
    perplexity: float = 30.0,
    seed: int = 32,
    n_components: int = 3,
    n_iter: int = 500,
    early_exaggeration: float = 12.0,
    exaggeration_iters: int = 50,
    learning_rate: float | None = None,
    ids: list[str] | None = None,
) -> Embedding:
    """Embed X with t-SNE; requires 3 * perplexity < N.

    ``info`` carries the KL trace (one value per iteration, exaggeration
    removed) for descent monitoring.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if 3.0 * perplexity >= n:
        raise ValueError(f"perplexity {perplexity} too large for N={n} (need 3*perp < N)")
    ids = [str(i) for i in range(n)] if ids is None else list(ids)
    if learning_rate is None:
        learning_rate = max(n / early_exaggeration / 4.0, 50.0)

    cond = perplexity_calibration(_pairwise_sq(X), perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P, _MACHINE_EPS)

    rng = np.random.default_rng(seed)
    Y = rng.normal(scale=1e-4, size=(n, n_components))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)

    kl_trace = []
    for it in range(n_iter):
        exaggerating = it < exaggeration_iters
        P_eff = P * early_exaggeration if exaggerating else P
        kl, grad = _kl_and_grad(Y, P_eff)
        if exaggerating:
            # record the unexaggerated objective for monitoring
            kl_trace.append(_kl_and_grad(Y, P)[0])
        else:
            kl_trace.append(kl)
        momentum = 0.5 if it < 250 else 0.8
        sign_agree = np.sign(grad) == np.sign(velocity)
        gains = np.where(sign_agree, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        velocity = momentum * velocity - learning_rate * gains * grad
        Y = Y + velocity
        Y -= Y.mean(axis=0)

    return Embedding(
        coords=Y,
        ids=ids,
        config={
            "method": "tsne",
            "n_components": n_components,
            "perplexity": perplexity,
            "seed": seed,
            "n_iter": n_iter,
            "early_exaggeration": early_exaggeration,
            "exaggeration_iters": exaggeration_iters,
            "learning_rate": learning_rate,
        },
        info={"kl_trace": np.asarray(kl_trace)},
    )

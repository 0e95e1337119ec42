"""Trained linear score fusion (class-balanced, L2-penalised logistic regression)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, TrainingError


@dataclass(frozen=True)
class FusionModel:
    matcher_ids: tuple
    weights: np.ndarray  # a_0, a_1, ..., a_N
    mean: np.ndarray
    std: np.ndarray

    @property
    def n_matchers(self) -> int:
        return len(self.matcher_ids)

    def to_json(self) -> dict:
        return {"matcher_ids": list(self.matcher_ids), "weights": self.weights.tolist(),
                "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj) -> "FusionModel":
        return cls(tuple(obj["matcher_ids"]), np.asarray(obj["weights"], float),
                   np.asarray(obj["mean"], float), np.asarray(obj["std"], float))


def _loss_grad_hess(w, X, y, sw, lam):
    z = X @ w
    # y in {+1, -1}; logaddexp keeps the loss finite for large margins
    m = y * z
    loss = float(np.sum(sw * np.logaddexp(0.0, -m)))
    p = 0.5 * (1.0 + np.tanh(-0.5 * m))  # sigmoid(-m)
    grad = X.T @ (-sw * y * p)
    curv = sw * p * (1.0 - p)
    hess = (X * curv[:, None]).T @ X
    pen = np.ones_like(w)
    pen[0] = 0.0  # bias not penalised
    loss += 0.5 * lam * float(np.sum(pen * w * w))
    grad = grad + lam * pen * w
    hess = hess + np.diag(lam * pen)
    return loss, grad, hess


def penalised_loss(w, X, y, sw, lam=1e-6) -> float:
    return _loss_grad_hess(np.asarray(w, float), X, y, sw, lam)[0]


def design(scores, labels):
    """Standardisation stats, design matrix with bias column, +/-1 targets and class-balanced weights."""
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim == 1:
        S = S[:, None]
    lab = np.asarray(labels, dtype=bool)
    if S.shape[0] != lab.shape[0]:
        raise InputError(f"{S.shape[0]} score rows but {lab.shape[0]} labels")
    if not np.all(np.isfinite(S)):
        raise InputError("fusion training scores must be finite")
    n_gen, n_imp = int(lab.sum()), int((~lab).sum())
    if n_gen == 0 or n_imp == 0:
        raise TrainingError("fusion training needs both genuine and impostor trials")
    mean = S.mean(axis=0)
    std = S.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    X = np.hstack([np.ones((S.shape[0], 1)), (S - mean) / std])
    y = np.where(lab, 1.0, -1.0)
    sw = np.where(lab, 0.5 / n_gen, 0.5 / n_imp)
    return X, y, sw, mean, std


def train(scores, labels, matcher_ids=None, lam: float = 1e-6, tol: float = 1e-9,
          max_iter: int = 10000) -> FusionModel:
    """Fit fusion weights by damped Newton iterations on the penalised log-likelihood.

    ``scores`` is (trials, N) with every matcher oriented as a similarity;
    ``labels`` is True for genuine trials. Genuine and impostor classes carry
    equal total weight.
    """
    X, y, sw, mean, std = design(scores, labels)
    n = X.shape[1] - 1
    matcher_ids = tuple(matcher_ids) if matcher_ids is not None else tuple(f"m{i + 1}" for i in range(n))
    if len(matcher_ids) != n:
        raise InputError(f"{len(matcher_ids)} matcher ids for {n} score columns")
    w = np.zeros(n + 1)
    loss, grad, hess = _loss_grad_hess(w, X, y, sw, lam)
    for _ in range(max_iter):
        if np.max(np.abs(grad)) < tol:
            break
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = -grad
        slope = float(grad @ step)
        if slope >= 0:
            step, slope = -grad, -float(grad @ grad)
        t = 1.0
        while True:
            cand = w + t * step
            c_loss, c_grad, c_hess = _loss_grad_hess(cand, X, y, sw, lam)
            if c_loss <= loss + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12 and c_loss > loss:
            break
        w, loss, grad, hess = cand, c_loss, c_grad, c_hess
    if not np.all(np.isfinite(w)):
        raise TrainingError("fusion weights diverged")
    return FusionModel(matcher_ids, w, mean, std)


def apply(model: FusionModel, trial_scores) -> np.ndarray | float:
    """Fused score ``a_0 + sum_i a_i * (s_i - mean_i) / std_i``; accepts one trial or a (trials, N) array."""
    s = np.asarray(trial_scores, dtype=np.float64)
    single = s.ndim == 1
    S = s[None, :] if single else s
    if S.shape[1] != model.n_matchers:
        raise InputError(f"expected {model.n_matchers} scores per trial, got {S.shape[1]}")
    if not np.all(np.isfinite(S)):
        raise InputError("trial scores must be finite")
    out = model.weights[0] + ((S - model.mean) / model.std) @ model.weights[1:]
    return float(out[0]) if single else out

"""Clean-set construction for a client's noisy local data."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .gmm import EmConfig, Gmm1D2, fit_em
from .model import ModelParams, TrainConfig, fine_tune_head, per_example_losses


@dataclass(frozen=True, eq=False)
class CleanSet:
    """Selected indices (``clean_prob > 0.5``) and the per-example clean probabilities."""

    indices: np.ndarray
    clean_prob: np.ndarray
    degenerate_gmms: int = 0
    fine_tune_skipped: bool = False

    def __post_init__(self):
        for name in ("indices", "clean_prob"):
            a = np.array(getattr(self, name))
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return len(self.indices)

    def same_as(self, other: "CleanSet") -> bool:
        return (np.array_equal(self.indices, other.indices)
                and np.array_equal(self.clean_prob, other.clean_prob))


def build_clean_set(ensemble_probs, **info) -> CleanSet:
    """Strict ``> 0.5`` threshold; a probability of exactly 0.5 is not selected."""
    p = np.asarray(ensemble_probs, dtype=np.float64)
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ContractViolation("clean probabilities must lie in [0, 1]")
    return CleanSet(np.flatnonzero(p > 0.5), p, **info)


def auxiliary_clean_set(target_gmm: Gmm1D2, losses) -> CleanSet:
    """Target-model-only selection: threshold of the target GMM's clean posterior."""
    return build_clean_set(target_gmm.posteriors(losses),
                           degenerate_gmms=int(target_gmm.degenerate))


def normalized_weights(reliabilities) -> np.ndarray:
    r = np.asarray(reliabilities, dtype=np.float64)
    if r.ndim != 1 or r.size == 0 or (r < 0).any():
        raise ContractViolation("reliabilities must be a nonempty nonnegative vector")
    total = r.sum()
    if not total > 0:
        raise ContractViolation("at least one reliability must be positive")
    return r / total


def ensemble_clean_prob(posteriors: Sequence, reliabilities) -> np.ndarray:
    """Reliability-weighted average of per-model clean posteriors."""
    P = np.asarray(posteriors, dtype=np.float64)
    if P.ndim != 2:
        raise ContractViolation("posteriors must be a (models, examples) array")
    w = normalized_weights(reliabilities)
    if w.shape[0] != P.shape[0]:
        raise ContractViolation("one reliability per model is required")
    return np.clip(w @ P, 0.0, 1.0)


def small_loss_select(losses, keep_fraction: float) -> np.ndarray:
    """Indices of the ``ceil(keep_fraction * n)`` smallest losses (ties: smaller index), ascending."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ContractViolation("small_loss_select needs at least one loss")
    if not 0.0 < keep_fraction <= 1.0:
        raise ContractViolation("keep_fraction must lie in (0, 1]")
    n_keep = min(math.ceil(keep_fraction * losses.size - 1e-12), losses.size)
    return np.sort(np.argsort(losses, kind="stable")[:n_keep])


def fedrn_select(target: ModelParams, neighbors: Sequence[ModelParams], X, y,
                 reliabilities, train_cfg: TrainConfig, em_cfg: EmConfig = EmConfig(),
                 fine_tune: bool = True) -> CleanSet:
    """Clean set from the target model and its ``k`` reliable neighbours.

    ``reliabilities`` lists ``R(c, c)`` first, then one score per neighbour.
    Neighbour heads are fine-tuned (one epoch) on the target-only auxiliary
    set; the passed-in models are never modified.  If every reliability is
    zero the ensemble falls back to equal weights.
    """
    r = np.asarray(reliabilities, dtype=np.float64)
    if r.shape != (len(neighbors) + 1,):
        raise ContractViolation("need R(c, c) plus one reliability per neighbour")
    target_losses = per_example_losses(target, X, y)
    target_gmm = fit_em(target_losses, em_cfg)
    aux = auxiliary_clean_set(target_gmm, target_losses)
    if not neighbors:
        return aux

    skipped = len(aux) == 0
    posts = [target_gmm.posteriors(target_losses)]
    degenerate = int(target_gmm.degenerate)
    for j, nb in enumerate(neighbors):
        if fine_tune and not skipped:
            stream = train_cfg.with_stream(*train_cfg.rng_stream, 1000 + j)
            nb, _ = fine_tune_head(nb, X[aux.indices], y[aux.indices], stream, epochs=1)
        losses = per_example_losses(nb, X, y)
        g = fit_em(losses, em_cfg)
        degenerate += int(g.degenerate)
        posts.append(g.posteriors(losses))
    if not r.sum() > 0:
        r = np.ones_like(r)
    return build_clean_set(ensemble_clean_prob(posts, r), degenerate_gmms=degenerate,
                           fine_tune_skipped=skipped and fine_tune)

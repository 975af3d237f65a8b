"""Server-side neighbour scoring: data expertise, probe similarity, reliability, top-k.

Nothing here sees client data; inputs are training accuracies and softmax
outputs on a shared Gaussian probe.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractViolation


def make_probe(input_dim: int, seed) -> np.ndarray:
    """One standard-normal probe vector, identical for every client in a simulation."""
    return np.random.default_rng(seed).standard_normal(input_dim)


def minmax(values) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant input maps to 0.5 everywhere."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)


def expertise_scores(accuracies) -> np.ndarray:
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.ndim != 1 or acc.shape[0] < 2:
        raise ContractViolation("expertise needs accuracies of at least two clients")
    return minmax(acc)


def cosine_matrix(probe_outputs) -> np.ndarray:
    """Raw pairwise cosine similarity of softmax vectors (exactly symmetric)."""
    P = np.asarray(probe_outputs, dtype=np.float64)
    if P.ndim != 2:
        raise ContractViolation("probe outputs must be a (clients, classes) array")
    norms = np.linalg.norm(P, axis=1)
    if (norms == 0).any():
        raise ContractViolation("probe outputs must be nonzero probability vectors")
    U = P / norms[:, None]
    S = U @ U.T
    S = np.triu(S) + np.triu(S, 1).T
    np.fill_diagonal(S, 1.0)
    return S


def similarity_matrix(probe_outputs) -> np.ndarray:
    """Cosine similarity, min-max normalised over off-diagonal entries, diagonal pinned to 1."""
    S = cosine_matrix(probe_outputs)
    n = S.shape[0]
    if n < 2:
        return np.ones((n, n))
    off = ~np.eye(n, dtype=bool)
    out = np.ones_like(S)
    out[off] = minmax(S[off])
    return out


def reliability(expertise, similarity, alpha: float) -> np.ndarray:
    """``R[c, n] = alpha * Exp[n] + (1 - alpha) * Sim[c, n]``; ``Sim[c, c]`` is 1."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation("alpha must lie in [0, 1]")
    exp = np.asarray(expertise, dtype=np.float64)
    sim = np.array(similarity, dtype=np.float64)
    np.fill_diagonal(sim, 1.0)
    return alpha * exp[None, :] + (1.0 - alpha) * sim


def top_k_neighbors(client: int, neighbor_ids: Sequence[int], scores, k: int) -> list[int]:
    """The ``k`` neighbours with the largest score, ties going to the smaller id."""
    ids = [int(i) for i in neighbor_ids]
    scores = np.asarray(scores, dtype=np.float64)
    if len(ids) != scores.shape[0]:
        raise ContractViolation("one score per neighbour is required")
    if client in ids:
        raise ContractViolation("a client is not its own neighbour")
    if k < 1 or k > len(ids):
        raise ConfigError(f"k={k} but {len(ids)} neighbours are available")
    order = sorted(range(len(ids)), key=lambda j: (-scores[j], ids[j]))
    return [ids[j] for j in order[:k]]


@dataclass(frozen=True, eq=False)
class ReliabilityTable:
    """One round's scores over the server's known clients (rows/cols follow ``client_ids``)."""

    client_ids: tuple[int, ...]
    raw_accuracies: np.ndarray
    expertise: np.ndarray
    similarity: np.ndarray
    alpha: float

    @classmethod
    def build(cls, client_ids, accuracies, probe_outputs, alpha: float) -> "ReliabilityTable":
        ids = tuple(int(c) for c in client_ids)
        acc = np.asarray(accuracies, dtype=np.float64)
        exp = expertise_scores(acc) if len(ids) >= 2 else np.full(len(ids), 0.5)
        return cls(ids, acc, exp, similarity_matrix(probe_outputs), float(alpha))

    @property
    def scores(self) -> np.ndarray:
        return reliability(self.expertise, self.similarity, self.alpha)

    def index(self, client: int) -> int:
        return self.client_ids.index(client)

    def to_csv(self, path, which: str = "similarity") -> None:
        """Square CSV with a header row of client ids (``similarity`` or ``reliability``)."""
        mat = {"similarity": self.similarity, "reliability": self.scores}[which]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["client"] + list(self.client_ids))
            for cid, row in zip(self.client_ids, mat):
                w.writerow([cid] + [repr(float(v)) for v in row])

"""Round-based federated simulation: FedAvg warm-up, then FedRN or a baseline.

The server object only ever handles client ids, models, training accuracies,
probe softmax outputs and data sizes.  Everything that touches examples runs
in the client-side functions.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import data as data_mod
from .data import ClientPartition, Dataset, NoiseSpec
from .errors import ConfigError
from .gmm import EmConfig
from .metrics import RoundMetrics, label_precision, label_recall, test_accuracy
from .model import (
    ModelParams,
    TrainConfig,
    average_params,
    init_model,
    predict_proba,
    sgd_train,
    training_accuracy,
    per_example_losses,
)
from .reliability import ReliabilityTable, make_probe, top_k_neighbors
from .selection import CleanSet, fedrn_select, small_loss_select

METHODS = ("fedavg", "fedrn", "small_loss", "oracle", "gmm")
NEIGHBOR_MODES = ("reliable", "random")

# rng purpose tags, combined with the master seed
_DATA, _PARTITION, _NOISE, _INIT, _PROBE, _SAMPLE, _TRAIN, _RANDOM_NB = range(1, 9)


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 10
    per_class: int = 500
    spread: float = 0.3
    dim: int = 10
    radius: float = 1.0
    partition: str = "shard"  # shard | dirichlet
    shards_per_client: int = 2
    beta: float = 0.5
    noise: str = "symmetric"  # symmetric | asymmetric | mixed | clean
    noise_lo: float = 0.0
    noise_hi: float = 0.8

    def __post_init__(self):
        if self.partition not in ("shard", "dirichlet"):
            raise ConfigError(f"data.partition: unknown partition {self.partition!r}")
        if self.noise not in ("symmetric", "asymmetric", "mixed", "clean"):
            raise ConfigError(f"noise.type: unknown noise type {self.noise!r}")
        if not 0.0 <= self.noise_lo <= self.noise_hi <= 1.0:
            raise ConfigError("noise.lo/noise.hi: need 0 <= lo <= hi <= 1")
        if self.num_classes < 2 or self.per_class < 1 or self.dim < 2 or not self.spread > 0:
            raise ConfigError("data: need num_classes >= 2, per_class >= 1, dim >= 2, spread > 0")


@dataclass(frozen=True)
class SimulationConfig:
    num_clients: int = 100
    participation_rate: float = 0.1
    rounds: int = 100
    warmup_rounds: int | None = None  # None -> 20% of rounds
    k: int = 2
    alpha: float = 0.6
    method: str = "fedrn"
    neighbor_mode: str = "reliable"
    fine_tune: bool = True
    keep_fraction: float = 0.6
    hidden: tuple[int, ...] = (32, 32)
    train: TrainConfig = TrainConfig()
    em: EmConfig = EmConfig()
    data: DataConfig = DataConfig()
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.validate()

    @property
    def participants_per_round(self) -> int:
        return math.ceil(round(self.participation_rate * self.num_clients, 9))

    @property
    def warmup(self) -> int:
        if self.warmup_rounds is None:
            return int(round(0.2 * self.rounds))
        return self.warmup_rounds

    @property
    def effective_k(self) -> int:
        return 0 if self.method == "gmm" else self.k

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ConfigError("num_clients: must be positive")
        if not 0.0 < self.participation_rate <= 1.0:
            raise ConfigError("participation_rate: must lie in (0, 1]")
        if self.rounds < 0:
            raise ConfigError("rounds: must be >= 0")
        if self.warmup_rounds is not None and self.warmup_rounds < 0:
            raise ConfigError("warmup_rounds: must be >= 0")
        if self.k < 0:
            raise ConfigError("k: must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha: must lie in [0, 1]")
        if self.method not in METHODS:
            raise ConfigError(f"method: unknown method {self.method!r}")
        if self.neighbor_mode not in NEIGHBOR_MODES:
            raise ConfigError(f"neighbor_mode: unknown mode {self.neighbor_mode!r}")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError("keep_fraction: must lie in (0, 1]")
        if self.method == "fedrn" and self.participants_per_round <= self.k:
            raise ConfigError(
                f"k: need participants per round ({self.participants_per_round}) > k ({self.k})"
            )


@dataclass
class FederatedData:
    train: Dataset  # noisy observed labels
    test: Dataset
    partition: ClientPartition
    noise: NoiseSpec

    def client(self, cid: int) -> Dataset:
        return self.train.subset(self.partition[cid])


def build_data(cfg: SimulationConfig) -> FederatedData:
    d = cfg.data
    seed = cfg.master_seed
    train, test = data_mod.make_blobs(d.num_classes, d.per_class, d.spread, d.dim,
                                      [seed, _DATA], radius=d.radius)
    if d.partition == "shard":
        part = data_mod.shard_partition(train, cfg.num_clients, d.shards_per_client,
                                        [seed, _PARTITION])
    elif d.partition == "dirichlet":
        part = data_mod.dirichlet_partition(train, cfg.num_clients, d.beta, [seed, _PARTITION])
    else:
        raise ConfigError(f"data.partition: unknown partition {d.partition!r}")
    rates = data_mod.linear_noise_schedule(cfg.num_clients, d.noise_lo, d.noise_hi)
    spec = NoiseSpec.build(d.noise, rates, d.num_classes)
    noisy = data_mod.inject_noise(train, part, spec, seed * 1000 + _NOISE)
    return FederatedData(noisy, test, part, spec)


def sample_participants(master_seed: int, round_idx: int, num_clients: int,
                        participation_rate: float) -> list[int]:
    m = math.ceil(round(participation_rate * num_clients, 9))
    rng = np.random.default_rng([master_seed, _SAMPLE, round_idx])
    return sorted(int(c) for c in rng.choice(num_clients, size=m, replace=False))


# ---------------------------------------------------------------- client side

@dataclass
class LocalUpdate:
    client: int
    params: ModelParams
    accuracy: float
    probe_output: np.ndarray
    data_size: int
    clean_set: CleanSet | None = None
    trained: bool = True


def _finish(client: int, params: ModelParams, data: Dataset, probe: np.ndarray,
            **kw) -> LocalUpdate:
    acc = training_accuracy(params, data.features, data.observed_labels)
    out = predict_proba(params, probe)[0]
    return LocalUpdate(client, params, acc, out, len(data), **kw)


def local_update_fedavg(client: int, data: Dataset, global_params: ModelParams,
                        cfg: TrainConfig, probe: np.ndarray) -> LocalUpdate:
    """Train a copy of the global model on every observed-label example."""
    params = sgd_train(global_params, data.features, data.observed_labels, cfg)
    return _finish(client, params, data, probe)


def _train_subset(client, data, global_params, cfg, probe, idx, clean_set=None):
    if len(idx) == 0:
        return _finish(client, global_params, data, probe, clean_set=clean_set, trained=False)
    params = sgd_train(global_params, data.features[idx], data.observed_labels[idx], cfg)
    return _finish(client, params, data, probe, clean_set=clean_set)


def local_update_fedrn(client: int, data: Dataset, global_params: ModelParams,
                       neighbor_models: Sequence[ModelParams], reliabilities,
                       cfg: TrainConfig, probe: np.ndarray, em_cfg: EmConfig = EmConfig(),
                       fine_tune: bool = True) -> LocalUpdate:
    """Select a clean set with the neighbours, then train the global model on it only.

    An empty clean set leaves the received global model as the update.
    """
    cs = fedrn_select(global_params, neighbor_models, data.features, data.observed_labels,
                      reliabilities, cfg, em_cfg, fine_tune=fine_tune)
    return _train_subset(client, data, global_params, cfg, probe, cs.indices, cs)


def local_update_small_loss(client: int, data: Dataset, global_params: ModelParams,
                            keep_fraction: float, cfg: TrainConfig,
                            probe: np.ndarray) -> LocalUpdate:
    losses = per_example_losses(global_params, data.features, data.observed_labels)
    idx = small_loss_select(losses, keep_fraction)
    prob = np.zeros(len(data))
    prob[idx] = 1.0
    return _train_subset(client, data, global_params, cfg, probe, idx, CleanSet(idx, prob))


def local_update_oracle(client: int, data: Dataset, global_params: ModelParams,
                        cfg: TrainConfig, probe: np.ndarray) -> LocalUpdate:
    """FedAvg restricted to the truly clean examples (reference upper bound)."""
    idx = np.flatnonzero(data.clean_mask())
    if len(idx) == len(data):
        return local_update_fedavg(client, data, global_params, cfg, probe)
    return _train_subset(client, data, global_params, cfg, probe, idx)


# ---------------------------------------------------------------- server side

@dataclass
class NeighborPlan:
    neighbors: list[int]
    reliabilities: np.ndarray  # R(c, c) first, then one per neighbour


@dataclass
class GlobalState:
    global_params: ModelParams
    round: int = 0
    accuracies: dict[int, float] = field(default_factory=dict)
    probe_outputs: dict[int, np.ndarray] = field(default_factory=dict)


def aggregate(models: Sequence[ModelParams], data_sizes) -> ModelParams:
    sizes = np.asarray(data_sizes, dtype=np.float64)
    if (sizes <= 0).any():
        raise ConfigError("data sizes must be positive")
    return average_params(models, sizes / sizes.sum())


class Server:
    """Holds the global model and the per-client summaries clients send back."""

    def __init__(self, params: ModelParams, alpha: float, k: int,
                 neighbor_mode: str = "reliable", master_seed: int = 0):
        self.state = GlobalState(params)
        self.local_models: dict[int, ModelParams] = {}
        self.alpha = alpha
        self.k = k
        self.neighbor_mode = neighbor_mode
        self.master_seed = master_seed
        self.last_table: ReliabilityTable | None = None

    @property
    def global_params(self) -> ModelParams:
        return self.state.global_params

    def reliability_table(self) -> ReliabilityTable | None:
        seen = sorted(self.state.accuracies)
        if not seen:
            return None
        return ReliabilityTable.build(
            seen, [self.state.accuracies[c] for c in seen],
            np.stack([self.state.probe_outputs[c] for c in seen]), self.alpha)

    def plan_neighbors(self, participants: Sequence[int], round_idx: int) -> dict[int, NeighborPlan]:
        """Pick each participant's neighbours among previously seen clients."""
        table = self.reliability_table()
        self.last_table = table
        plans = {}
        R = table.scores if table is not None else None
        for c in participants:
            if table is None:
                plans[c] = NeighborPlan([], np.array([1.0]))
                continue
            ids = list(table.client_ids)
            pool = [n for n in ids if n != c]
            exp = dict(zip(ids, table.expertise))
            if c in ids:
                row = R[table.index(c)]
                scores = {n: row[table.index(n)] for n in ids}
            else:
                # no probe output for c yet: similarity carries no information
                scores = {n: self.alpha * exp[n] + (1 - self.alpha) * 0.5 for n in pool}
                scores[c] = self.alpha * 0.5 + (1 - self.alpha)
            k = min(self.k, len(pool))
            if k == 0:
                chosen = []
            elif self.neighbor_mode == "random":
                rng = np.random.default_rng([self.master_seed, _RANDOM_NB, round_idx, c])
                chosen = sorted(int(n) for n in rng.choice(pool, size=k, replace=False))
            else:
                chosen = top_k_neighbors(c, pool, [scores[n] for n in pool], k)
            plans[c] = NeighborPlan(chosen, np.array([scores[c]] + [scores[n] for n in chosen]))
        return plans

    def neighbor_models(self, plan: NeighborPlan) -> list[ModelParams]:
        return [self.local_models[n] for n in plan.neighbors]

    def aggregate(self, updates: Sequence[LocalUpdate]) -> ModelParams:
        """FedAvg over the received models, weighted by each client's full local data size."""
        self.state.global_params = aggregate([u.params for u in updates],
                                             [u.data_size for u in updates])
        for u in updates:
            self.state.accuracies[u.client] = u.accuracy
            self.state.probe_outputs[u.client] = np.asarray(u.probe_output)
            self.local_models[u.client] = u.params
        self.state.round += 1
        return self.state.global_params


# ---------------------------------------------------------------- simulation

@dataclass
class SimulationResult:
    metrics: list[RoundMetrics]
    state: GlobalState
    initial_params: ModelParams
    data: FederatedData
    server: Server

    @property
    def final_test_accuracy(self) -> float | None:
        return self.metrics[-1].test_accuracy if self.metrics else None


def _threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("FEDRN_THREADS", "1") or 1)
    return max(1, threads)


def run_simulation(cfg: SimulationConfig, data: FederatedData | None = None,
                   threads: int | None = None, on_round=None) -> SimulationResult:
    """Run ``cfg.rounds`` rounds; FedAvg during warm-up, then ``cfg.method``.

    Local updates of a round are independent (per-client rng streams keyed
    on seed, round and client id), so ``threads > 1`` gives the same result
    as sequential execution.  ``on_round(server, metrics)`` is called after
    each aggregation.
    """
    cfg.validate()
    data = data if data is not None else build_data(cfg)
    seed = cfg.master_seed
    init = init_model(data.train.dim, data.train.num_classes, cfg.hidden, [seed, _INIT])
    probe = make_probe(data.train.dim, [seed, _PROBE])
    server = Server(init, cfg.alpha, cfg.effective_k, cfg.neighbor_mode, seed)
    clients = {c: data.client(c) for c in range(cfg.num_clients)}
    n_threads = _threads(threads)
    pool = ThreadPoolExecutor(n_threads) if n_threads > 1 else None
    history: list[RoundMetrics] = []
    try:
        for t in range(cfg.rounds):
            participants = sample_participants(seed, t, cfg.num_clients, cfg.participation_rate)
            robust = t >= cfg.warmup and cfg.method in ("fedrn", "gmm", "small_loss")
            plans = (server.plan_neighbors(participants, t)
                     if robust and cfg.method in ("fedrn", "gmm") else None)
            g = server.global_params

            def work(c, g=g, plans=plans, robust=robust, t=t):
                tc = cfg.train.with_stream(seed, _TRAIN, t, c)
                d = clients[c]
                if cfg.method == "oracle":
                    return local_update_oracle(c, d, g, tc, probe)
                if not robust:
                    return local_update_fedavg(c, d, g, tc, probe)
                if cfg.method == "small_loss":
                    return local_update_small_loss(c, d, g, cfg.keep_fraction, tc, probe)
                plan = plans[c]
                return local_update_fedrn(c, d, g, server.neighbor_models(plan),
                                          plan.reliabilities, tc, probe, cfg.em, cfg.fine_tune)

            if pool is None:
                updates = [work(c) for c in participants]
            else:
                updates = list(pool.map(work, participants))
            server.aggregate(updates)
            history.append(_round_metrics(t, server.global_params, updates, clients,
                                          data.test, robust))
            if on_round is not None:
                on_round(server, history[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    return SimulationResult(history, server.state, init, data, server)


def _round_metrics(t, global_params, updates, clients, test_set, robust) -> RoundMetrics:
    lp, lr, sizes = [], [], []
    empty = degenerate = 0
    for u in updates:
        d = clients[u.client]
        if u.clean_set is not None:
            sel = u.clean_set.indices
            degenerate += u.clean_set.degenerate_gmms
        else:
            sel = np.arange(len(d))
        if not u.trained:
            empty += 1
        sizes.append(len(sel))
        lp.append(label_precision(sel, d))
        lr.append(label_recall(sel, d))
    return RoundMetrics(
        round=t + 1,
        test_accuracy=test_accuracy(global_params, test_set),
        per_client_accuracy=[test_accuracy(u.params, test_set) for u in updates],
        participants=[u.client for u in updates],
        clean_set_sizes=sizes,
        label_precision=lp,
        label_recall=lr,
        empty_clean_flags=empty,
        degenerate_gmm_count=degenerate,
        selection_active=robust,
    )


# ---------------------------------------------------------------- checkpoints

def save_params(path, params: ModelParams, round_idx: int = 0) -> None:
    """One scalar per line (kernel layout) under a layer-shape header."""
    with open(path, "w") as fh:
        fh.write(f"# round={round_idx}\n")
        fh.write("# dims=" + ",".join(str(d) for d in params.architecture) + "\n")
        for v in params.flat():
            fh.write(repr(float(v)) + "\n")


def load_params(path) -> tuple[ModelParams, int]:
    round_idx, dims, vals = 0, None, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# round="):
                round_idx = int(line.split("=", 1)[1])
            elif line.startswith("# dims="):
                dims = [int(x) for x in line.split("=", 1)[1].split(",")]
            elif line:
                vals.append(float(line))
    if dims is None:
        raise ConfigError(f"{path}: missing dims header")
    return ModelParams.from_flat(np.array(vals), dims), round_idx


def with_overrides(cfg: SimulationConfig, **kw) -> SimulationConfig:
    return replace(cfg, **kw)

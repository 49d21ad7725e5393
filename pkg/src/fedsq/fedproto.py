"""Synchronous federation loop: FedAvg, FedProx and FedSQ on simulated clients.

Each round the server samples clients, broadcasts the current parameters,
lets every sampled client train locally (optionally on a thread pool) and
aggregates the returned parameters weighted by shard size. Results do not
depend on the worker count: client generators are seeded from
``(seed, client, round)`` and aggregation always runs in ascending client id.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dualcopy, nncore
from .calibrate import Schedule
from .dualcopy import DualCopyModel
from .errors import ConfigurationError, FedSQError, FormatError, ProtocolError
from .nncore import ModelParams
from .partition import Dataset, PartitionPlan, make_plan

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "fedprox", "fedsq")
SCALAR_BYTES = 8
CSV_HEADER = (
    "round", "strategy", "train_loss_mean", "val_loss", "val_accuracy",
    "bytes_broadcast", "bytes_uploaded", "wall_time_s", "clients",
)


@dataclass(frozen=True)
class FederationConfig:
    m: int = 10
    k: int | None = None  # None -> full participation
    e: int = 1
    t: int = 5
    lr: float = 1e-2
    wd: float = 1e-4
    batch_size: int = 64
    strategy: str = "fedavg"
    mu: float = 0.01
    partition: str = "iid"
    alpha: float = 0.5
    min_per_client: int | None = None  # None -> one batch
    seed: int = 0
    eval_every: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.k is None:
            object.__setattr__(self, "k", self.m)
        if self.min_per_client is None:
            object.__setattr__(self, "min_per_client", self.batch_size)
        problems = []
        if self.m < 1:
            problems.append("m must be >= 1")
        if not 1 <= self.k <= self.m:
            problems.append(f"k must lie in [1, m={self.m}], got {self.k}")
        if self.e < 1:
            problems.append("e must be >= 1")
        if self.t < 1:
            problems.append("t must be >= 1")
        if self.lr < 0 or self.wd < 0:
            problems.append("lr and wd must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mu < 0:
            problems.append("mu must be >= 0")
        if self.partition not in ("iid", "dirichlet"):
            problems.append(f"partition must be 'iid' or 'dirichlet', got {self.partition!r}")
        if self.alpha <= 0:
            problems.append("alpha must be > 0")
        if self.eval_every < 1 or self.workers < 1:
            problems.append("eval_every and workers must be >= 1")
        if problems:
            raise ConfigurationError("; ".join(problems))


@dataclass
class ClientState:
    id: int
    shard: Dataset
    local_params: ModelParams | None = None

    def __post_init__(self):
        if len(self.shard) < 1:
            raise ProtocolError(f"client {self.id} has an empty shard")

    @property
    def n_i(self) -> int:
        return len(self.shard)


@dataclass
class ServerState:
    config: FederationConfig
    global_state: ModelParams | DualCopyModel
    round: int = 0


@dataclass(frozen=True)
class RoundLog:
    round: int
    strategy: str
    train_loss_mean: float
    val_loss: float
    val_accuracy: float
    participating_clients: tuple
    wall_time: float
    bytes_broadcast: int
    bytes_uploaded: int

    def csv_row(self) -> list:
        return [
            self.round, self.strategy, repr(self.train_loss_mean), repr(self.val_loss),
            repr(self.val_accuracy), self.bytes_broadcast, self.bytes_uploaded,
            f"{self.wall_time:.6f}", " ".join(str(c) for c in self.participating_clients),
        ]


@dataclass
class FederationResult:
    logs: list
    final: ModelParams | DualCopyModel
    plan: PartitionPlan
    sk_digests: list = field(default_factory=list)

    @property
    def best(self) -> tuple:
        return best_round(self.logs)

    def final_params(self) -> ModelParams:
        return self.final.qk if isinstance(self.final, DualCopyModel) else self.final


def best_round(logs: Sequence[RoundLog]) -> tuple:
    """``(round, val_accuracy)`` of the best evaluated round; ties go to the earliest."""
    best = None
    for entry in logs:
        if math.isnan(entry.val_accuracy):
            continue
        if best is None or entry.val_accuracy > best[1]:
            best = (entry.round, entry.val_accuracy)
    if best is None:
        raise ProtocolError("no evaluated rounds")
    return best


# ---------------------------------------------------------------------------
# Sampling and local training
# ---------------------------------------------------------------------------


def client_rng(seed: int, client_id: int, round_idx: int) -> np.random.Generator:
    return np.random.default_rng([seed, client_id, round_idx])


def sample_clients(server: ServerState) -> list:
    cfg = server.config
    if server.round >= cfg.t:
        raise ProtocolError(f"federation already finished {cfg.t} rounds")
    if cfg.k == cfg.m:
        return list(range(cfg.m))
    rng = np.random.default_rng([cfg.seed, server.round, 0x5A3])
    return sorted(int(c) for c in rng.choice(cfg.m, size=cfg.k, replace=False))


def _sgd(params, client, cfg, trainable, rng, grad_fn=None):
    return nncore.minibatch_sgd(
        params.arch, params, client.shard.inputs, client.shard.labels,
        lr=cfg.lr, wd=cfg.wd, batch_size=cfg.batch_size, epochs=cfg.e, rng=rng,
        trainable_mask=trainable, grad_fn=grad_fn,
    )


def _fedavg(global_params, client, cfg, schedule, rng):
    return _sgd(global_params, client, cfg, schedule, rng)


def _fedprox(global_params, client, cfg, schedule, rng):
    if cfg.mu == 0:
        return _sgd(global_params, client, cfg, schedule, rng)
    arch = global_params.arch

    def grad_fn(p, xb, yb):
        loss, grads = nncore.backward(arch, p, xb, yb, schedule)
        layers = grads.layers()
        drift = p.select(layers) - global_params.select(layers)
        return loss, grads + cfg.mu * drift

    return _sgd(global_params, client, cfg, schedule, rng, grad_fn)


def _fedsq(global_qk, sk, schedule, client, cfg, rng):
    base = DualCopyModel(sk.arch, sk, global_qk, schedule)

    def grad_fn(qk, xb, yb):
        model = base.with_qk(qk)
        masks = dualcopy.compute_masks(model, xb)
        return dualcopy.gated_backward(model, masks, xb, yb)

    return _sgd(global_qk, client, cfg, schedule, rng, grad_fn)


def local_train_fedavg(global_params: ModelParams, client: ClientState, cfg: FederationConfig,
                       schedule: Schedule | None = None, round_idx: int = 0) -> ModelParams:
    """``cfg.e`` epochs of mini-batch SGD on the client shard, starting from ``global_params``."""
    rng = client_rng(cfg.seed, client.id, round_idx)
    return _fedavg(global_params, client, cfg, schedule, rng)[0]


def local_train_fedprox(global_params: ModelParams, client: ClientState, cfg: FederationConfig,
                        schedule: Schedule | None = None, round_idx: int = 0) -> ModelParams:
    """FedAvg local training with ``mu * (w - w_global)`` added to every gradient."""
    rng = client_rng(cfg.seed, client.id, round_idx)
    return _fedprox(global_params, client, cfg, schedule, rng)[0]


def local_train_fedsq(global_qk: ModelParams, sk: ModelParams, schedule: Schedule,
                      client: ClientState, cfg: FederationConfig, round_idx: int = 0) -> ModelParams:
    """Masked training of the quantitative copy; per batch the gates come from ``sk``."""
    rng = client_rng(cfg.seed, client.id, round_idx)
    return _fedsq(global_qk, sk, schedule, client, cfg, rng)[0]


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def aggregation_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    return sizes / sizes.sum()


def aggregate(updates: Sequence[tuple], client_ids: Sequence[int] | None = None) -> ModelParams:
    """Weighted mean ``sum_i n_i / sum_j n_j * w_i``, accumulated in list order.

    ``updates`` is a list of ``(params, n_i)`` pairs; callers pass them in
    ascending client id so the floating-point summation order is fixed.
    """
    if not updates:
        raise ProtocolError("cannot aggregate an empty update list")
    ids = list(client_ids) if client_ids is not None else list(range(len(updates)))
    first = updates[0][0]
    for cid, (params, n_i) in zip(ids, updates):
        if n_i < 1:
            raise ProtocolError(f"client {cid} reported n_i={n_i}")
        if params.arch != first.arch or params.layers() != first.layers() or any(
            params[k][0].shape != first[k][0].shape for k in first.layers()
        ):
            raise ProtocolError(f"client {cid} sent parameters that do not match the others")
    weights = aggregation_weights([n for _, n in updates])
    total = None
    for (params, _), w in zip(updates, weights):
        term = float(w) * params
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def evaluate_global(state, val: Dataset) -> tuple:
    """``(accuracy, loss)``; FedSQ models gate validation inputs through SK."""
    if isinstance(state, DualCopyModel):
        masks = dualcopy.compute_masks(state, val.inputs)
        logits = dualcopy.gated_forward(state, masks, val.inputs)
    else:
        logits, _ = nncore.forward(state.arch, state, val.inputs)
    return nncore.accuracy(logits, val.labels), nncore.loss_ce(logits, val.labels)


class RoundLogWriter:
    """Appends RoundLogs to a CSV file as rounds finish."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(CSV_HEADER)

    def append(self, entry: RoundLog) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(entry.csv_row())


def read_round_logs(path) -> list:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise FormatError(f"{path}: missing or unexpected header")
    if len(rows) == 1:
        raise FormatError(f"{path}: log has no rounds")
    logs = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            r = dict(zip(CSV_HEADER, row, strict=True))
            logs.append(RoundLog(
                round=int(r["round"]), strategy=r["strategy"],
                train_loss_mean=float(r["train_loss_mean"]), val_loss=float(r["val_loss"]),
                val_accuracy=float(r["val_accuracy"]),
                participating_clients=tuple(int(c) for c in r["clients"].split()),
                wall_time=float(r["wall_time_s"]), bytes_broadcast=int(r["bytes_broadcast"]),
                bytes_uploaded=int(r["bytes_uploaded"]),
            ))
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from exc
    return logs


def _run_clients(fn: Callable, clients: list, workers: int, round_idx: int) -> list:
    def guarded(client):
        try:
            return fn(client)
        except FedSQError as exc:
            raise ProtocolError(f"round {round_idx + 1}: client {client.id} failed: {exc}") from exc

    if workers <= 1 or len(clients) == 1:
        return [guarded(c) for c in clients]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(guarded, clients))


def run_federation(
    cfg: FederationConfig,
    data: Dataset,
    val: Dataset,
    w_pt: ModelParams,
    schedule: Schedule | None = None,
    *,
    plan: PartitionPlan | None = None,
    log_path=None,
    callback: Callable | None = None,
) -> FederationResult:
    """Partition, then ``cfg.t`` synchronous rounds; one RoundLog per round.

    ``callback(round, server_state)`` runs after each aggregation.
    """
    arch = w_pt.arch
    n_layers = len(arch.param_layers)
    if schedule is None:
        schedule = Schedule.all_trainable(n_layers)
    if len(schedule) != n_layers:
        raise ConfigurationError(f"schedule has {len(schedule)} entries for {n_layers} layers")
    if plan is None:
        plan = make_plan(data, cfg.m, cfg.partition, cfg.seed, cfg.alpha, cfg.min_per_client)
    if plan.m != cfg.m:
        raise ConfigurationError(f"partition plan has {plan.m} clients, config m={cfg.m}")
    clients = [ClientState(i, plan.shard(data, i)) for i in range(cfg.m)]
    trainable = nncore.resolve_trainable(arch, schedule)
    full_bytes = w_pt.num_scalars() * SCALAR_BYTES
    fedsq = cfg.strategy == "fedsq"

    if fedsq:
        state = dualcopy.make_dual_copy(w_pt, schedule)
        qk_bytes = state.qk.num_scalars(trainable) * SCALAR_BYTES
        # SK and the initial QK go to every client once, before round 1
        initial_broadcast = cfg.m * 2 * full_bytes
        sk_digests = [state.sk.digest()]
    else:
        state = nncore.ModelParams(arch, dict(w_pt.items()))
        initial_broadcast = 0
        sk_digests = []
    server = ServerState(cfg, state)
    writer = RoundLogWriter(log_path) if log_path is not None else None

    logs = []
    for r in range(cfg.t):
        server.round = r
        t0 = time.perf_counter()
        ids = sample_clients(server)
        chosen = [clients[i] for i in ids]
        current = server.global_state

        if fedsq:
            def work(c, current=current, r=r):
                rng = client_rng(cfg.seed, c.id, r)
                qk, losses = _fedsq(current.qk, current.sk, schedule, c, cfg, rng)
                return qk.select(trainable), losses
            broadcast = (initial_broadcast if r == 0 else len(ids) * qk_bytes)
            upload = len(ids) * qk_bytes
        else:
            local = _fedprox if cfg.strategy == "fedprox" else _fedavg

            def work(c, current=current, r=r, local=local):
                rng = client_rng(cfg.seed, c.id, r)
                return local(current, c, cfg, schedule, rng)
            broadcast = len(ids) * full_bytes
            upload = len(ids) * full_bytes

        results = _run_clients(work, chosen, cfg.workers, r)
        merged = aggregate([(p, c.n_i) for (p, _), c in zip(results, chosen)], ids)
        if fedsq:
            server.global_state = current.with_qk(current.qk.replace(merged))
            sk_digests.append(server.global_state.sk.digest())
        else:
            server.global_state = merged

        train_loss = float(np.mean([np.mean(losses) for _, losses in results]))
        if (r + 1) % cfg.eval_every == 0 or r == cfg.t - 1:
            val_acc, val_loss = evaluate_global(server.global_state, val)
        else:
            val_acc = val_loss = float("nan")
        entry = RoundLog(
            round=r + 1, strategy=cfg.strategy, train_loss_mean=train_loss,
            val_loss=val_loss, val_accuracy=val_acc, participating_clients=tuple(ids),
            wall_time=time.perf_counter() - t0, bytes_broadcast=broadcast, bytes_uploaded=upload,
        )
        logs.append(entry)
        if writer is not None:
            writer.append(entry)
        log.info("%s round %d: train loss %.4f, val acc %.4f", cfg.strategy, r + 1, train_loss, val_acc)
        if callback is not None:
            callback(r + 1, server)
    server.round = cfg.t
    return FederationResult(logs, server.global_state, plan, sk_digests)


def with_strategy(cfg: FederationConfig, strategy: str, **overrides) -> FederationConfig:
    return replace(cfg, strategy=strategy, **overrides)

"""Round engine for hybrid FL: CLG-SGD, FedCLG-C, FedCLG-S and baselines.

One round of every hybrid variant follows the same skeleton::

    sample M clients -> (server gradient) -> client local steps
        -> aggregation -> E server local steps on the round's server data

The variants differ only in where the server gradient ``g_s`` enters:

* ``fedclg-c`` broadcasts ``g_s``; each client adds ``c_i = g_s - grad f_i(x_t)``
  to every local step.
* ``fedclg-s`` keeps ``g_s``; each client uploads ``grad f_i(x_t)`` and the
  server subtracts ``K * eta * (g_s - g_i)`` from that client's delta.

Randomness is drawn from per-purpose streams (see :mod:`hybridfl.seeding`), so
variants that share a master seed see identical client samples, server draws
and minibatches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import seeding
from .data import ClientShard, LabeledDataset, ServerDataset, draw_server_dataset
from .errors import (
    AggregationError,
    HybridFLError,
    NonFiniteError,
    SamplingError,
    TrainingAborted,
)
from .model import GradientEstimate, Objective, accuracy, gradient, init_params, loss

ALGORITHMS = ("fedavg", "server-only", "clg-sgd", "fedclg-c", "fedclg-s", "scaffold-plus")


@dataclass(frozen=True)
class HyperParams:
    """Rates and counts for a run.

    ``client_batch`` / ``server_batch`` are minibatch sizes, or ``None`` for
    full-batch steps. ``decay`` multiplies ``eta`` and ``gamma`` after every
    round, never pushing a rate below ``floor``.
    """

    eta: float
    eta_g: float
    gamma: float
    K: int
    E: int
    T: int
    M: int
    N: int
    m_s: int
    client_batch: int | None = None
    server_batch: int | None = None
    decay: float = 0.99
    floor: float = 0.001

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not self.eta_g > 0:
            raise ValueError("eta_g must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.E < 0:
            raise ValueError("E must be >= 0")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.M > self.N:
            raise ValueError(f"M exceeds N ({self.M} > {self.N})")
        if self.m_s < 1:
            raise ValueError("m_s must be >= 1")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        if not self.floor > 0:
            raise ValueError("floor must be > 0")
        for name in ("client_batch", "server_batch"):
            b = getattr(self, name)
            if b is not None and b < 1:
                raise ValueError(f"{name} must be >= 1 or None")


def decay_rate(rate: float, decay: float, floor: float) -> float:
    """One decay step. Rates already at or below ``floor`` are left alone."""
    if rate <= floor:
        return rate
    return max(floor, rate * decay)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    anchor_grad: np.ndarray | None = None
    steps_taken: int = 0
    control_delta: np.ndarray | None = None


@dataclass(frozen=True)
class CommRecord:
    floats_down: int = 0
    floats_up: int = 0

    def __add__(self, other: "CommRecord") -> "CommRecord":
        return CommRecord(self.floats_down + other.floats_down, self.floats_up + other.floats_up)


@dataclass(frozen=True)
class RoundState:
    t: int
    x: np.ndarray
    master_seed: int
    eta_t: float
    gamma_t: float
    c_global: np.ndarray | None = None
    c_clients: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, x0: np.ndarray, hp: HyperParams, master_seed: int, algorithm: str = "clg-sgd"):
        x0 = np.array(x0, dtype=np.float64)
        c = np.zeros_like(x0) if algorithm == "scaffold-plus" else None
        return cls(0, x0, int(master_seed), hp.eta, hp.gamma, c, {})


def _finite(v: np.ndarray, what: str, round=None, client_id=None) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"nonfinite {what}", round=round, client_id=client_id)
    return v


def sample_clients(N: int, M: int, rng: np.random.Generator) -> list[int]:
    """M distinct client ids, uniform over all C(N, M) subsets, ascending."""
    if not 1 <= M <= N:
        raise SamplingError(f"need 1 <= M <= N, got M={M}, N={N}")
    if M == N:
        return list(range(N))
    return sorted(int(i) for i in rng.choice(N, size=M, replace=False))


def client_local_train(
    obj: Objective,
    x_t: np.ndarray,
    shard: ClientShard,
    eta: float,
    K: int,
    batch: int | None = None,
    rng: np.random.Generator | None = None,
    correction: np.ndarray | None = None,
    *,
    round: int | None = None,
) -> ClientUpdate:
    """K steps of ``x <- x - eta * (g + correction)``; returns the cumulative delta."""
    if correction is not None and correction.shape != x_t.shape:
        raise AggregationError(
            f"correction has length {correction.shape[0]}, model has {x_t.shape[0]}"
        )
    x = np.array(x_t, dtype=np.float64)
    for _ in range(K):
        g = _finite(
            gradient(obj, x, shard.data, batch, rng).vector,
            "client gradient", round, shard.client_id,
        )
        if correction is not None:
            g = g + correction
        x = x - eta * g
    return ClientUpdate(shard.client_id, x - x_t, steps_taken=K)


def compute_server_gradient(
    obj: Objective,
    x_t: np.ndarray,
    server_ds: ServerDataset,
    batch: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradientEstimate:
    est = gradient(obj, x_t, server_ds.data, batch, rng)
    _finite(est.vector, "server gradient", server_ds.round)
    return est


def _ordered(updates: Sequence[ClientUpdate], dim: int) -> list[ClientUpdate]:
    if not updates:
        raise AggregationError("no updates to aggregate")
    for u in updates:
        if u.delta.shape != (dim,):
            raise AggregationError(
                f"client {u.client_id} delta has length {u.delta.size}, model has {dim}"
            )
    return sorted(updates, key=lambda u: u.client_id)


def _mean_fold(vectors: list[np.ndarray]) -> np.ndarray:
    total = np.zeros_like(vectors[0])
    for v in vectors:
        total = total + v
    return total / len(vectors)


def aggregate_plain(x_t: np.ndarray, updates: Sequence[ClientUpdate], eta_g: float) -> np.ndarray:
    """``x_t + eta_g * mean(delta_i)``, summed in ascending client-id order."""
    ups = _ordered(updates, x_t.shape[0])
    return x_t + eta_g * _mean_fold([u.delta for u in ups])


def aggregate_corrected(
    x_t: np.ndarray,
    updates: Sequence[ClientUpdate],
    g_s: np.ndarray,
    eta: float,
    eta_g: float,
    K: int,
) -> np.ndarray:
    """``x_t + eta_g * mean(delta_i - K * eta * (g_s - g_i))``."""
    ups = _ordered(updates, x_t.shape[0])
    terms = []
    for u in ups:
        if u.anchor_grad is None:
            raise AggregationError(f"client {u.client_id} update has no anchor gradient")
        if u.anchor_grad.shape != g_s.shape:
            raise AggregationError(f"client {u.client_id} anchor gradient has wrong length")
        terms.append(u.delta - K * eta * (g_s - u.anchor_grad))
    return x_t + eta_g * _mean_fold(terms)


def server_local_train(
    obj: Objective,
    x: np.ndarray,
    server_ds: ServerDataset,
    gamma: float,
    E: int,
    batch: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    if E < 0:
        raise ValueError("E must be >= 0")
    x = np.array(x, dtype=np.float64)
    for _ in range(E):
        g = _finite(gradient(obj, x, server_ds.data, batch, rng).vector, "server gradient", server_ds.round)
        x = x - gamma * g
    return x


def comm_for_round(algorithm: str, M: int, d: int) -> CommRecord:
    """Floats moved in one round, summed over the M participants."""
    if algorithm == "server-only":
        return CommRecord(0, 0)
    down = up = M * d
    if algorithm == "fedclg-c":
        down += M * d
    elif algorithm == "fedclg-s":
        up += M * d
    elif algorithm == "scaffold-plus":
        down += M * d
        up += M * d
    return CommRecord(down, up)


def run_round(
    algorithm: str,
    state: RoundState,
    obj: Objective,
    shards: Sequence[ClientShard],
    population: LabeledDataset,
    hp: HyperParams,
    *,
    zero_correction: bool = False,
) -> tuple[RoundState, CommRecord]:
    """Advance one round. ``zero_correction`` is a test hook for FedCLG-C."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; valid choices: {', '.join(ALGORITHMS)}")
    if len(shards) != hp.N:
        raise ValueError(f"hp.N={hp.N} but {len(shards)} shards were given")
    t, seed, x_t = state.t, state.master_seed, state.x
    eta, gamma = state.eta_t, state.gamma_t
    d = x_t.shape[0]

    server_ds = None
    if algorithm != "fedavg":
        server_ds = draw_server_dataset(population, hp.m_s, t, seed)

    def server_phase(x):
        E = 0 if algorithm == "fedavg" else hp.E
        if E == 0:
            return x
        rng = seeding.derive_rng(seed, seeding.SERVER_TRAIN, t)
        return server_local_train(obj, x, server_ds, gamma, E, hp.server_batch, rng)

    if algorithm == "server-only":
        x_next = server_phase(x_t)
        return replace(state, t=t + 1, x=_finite(x_next, "model", t)), comm_for_round(algorithm, hp.M, d)

    selected = sample_clients(hp.N, hp.M, seeding.derive_rng(seed, seeding.CLIENT_SAMPLING, t))

    def client_rng(i):
        return seeding.derive_rng(seed, seeding.CLIENT_TRAIN, t, i)

    g_s = None
    if algorithm in ("fedclg-c", "fedclg-s"):
        g_s = compute_server_gradient(obj, x_t, server_ds).vector

    updates = []
    c_global, c_clients = state.c_global, dict(state.c_clients)
    for i in selected:
        shard = shards[i]
        if algorithm == "fedclg-c":
            g_i = _finite(gradient(obj, x_t, shard.data).vector, "client gradient", t, i)
            c_i = np.zeros(d) if zero_correction else g_s - g_i
            u = client_local_train(obj, x_t, shard, eta, hp.K, hp.client_batch, client_rng(i), c_i, round=t)
        elif algorithm == "fedclg-s":
            u = client_local_train(obj, x_t, shard, eta, hp.K, hp.client_batch, client_rng(i), round=t)
            g_i = _finite(gradient(obj, x_t, shard.data).vector, "client gradient", t, i)
            u = replace(u, anchor_grad=g_i)
        elif algorithm == "scaffold-plus":
            c_i = c_clients.get(i, np.zeros(d))
            u = client_local_train(
                obj, x_t, shard, eta, hp.K, hp.client_batch, client_rng(i), c_global - c_i, round=t
            )
            # option-II control variate: c_i+ = c_i - c + (x_t - y_K) / (K eta)
            c_new = c_i - c_global - u.delta / (hp.K * eta)
            u = replace(u, control_delta=c_new - c_i)
            c_clients[i] = c_new
        else:
            u = client_local_train(obj, x_t, shard, eta, hp.K, hp.client_batch, client_rng(i), round=t)
        updates.append(u)

    if algorithm == "fedclg-s":
        x_half = aggregate_corrected(x_t, updates, g_s, eta, hp.eta_g, hp.K)
    else:
        x_half = aggregate_plain(x_t, updates, hp.eta_g)

    if algorithm == "scaffold-plus":
        dc = _mean_fold([u.control_delta for u in sorted(updates, key=lambda u: u.client_id)])
        c_global = c_global + (len(updates) / hp.N) * dc

    x_next = _finite(server_phase(x_half), "model", t)
    new_state = replace(state, t=t + 1, x=x_next, c_global=c_global, c_clients=c_clients)
    return new_state, comm_for_round(algorithm, hp.M, d)


class TraceRow(NamedTuple):
    round: int
    grad_norm_sq: float
    train_loss: float
    test_accuracy: float
    floats_up: int
    floats_down: int
    eta_t: float
    gamma_t: float


TRACE_COLUMNS = TraceRow._fields


@dataclass
class TrainingTrace:
    algorithm: str
    master_seed: int
    rows: list[TraceRow] = field(default_factory=list)
    aborted: bool = False
    final_x: np.ndarray | None = field(default=None, repr=False)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)


def _metrics_row(t, obj, x, train, test, comm: CommRecord, eta, gamma) -> TraceRow:
    g = gradient(obj, x, train).vector
    acc = accuracy(obj, x, test) if (test is not None and obj.kind != "least-squares") else math.nan
    return TraceRow(
        t, float(g @ g), loss(obj, x, train), acc, comm.floats_up, comm.floats_down, eta, gamma
    )


def run_training(
    algorithm: str,
    obj: Objective,
    shards: Sequence[ClientShard],
    hp: HyperParams,
    master_seed: int,
    test_data: LabeledDataset | None = None,
    x0: np.ndarray | None = None,
    population: LabeledDataset | None = None,
    *,
    zero_correction: bool = False,
) -> TrainingTrace:
    """Run ``hp.T`` rounds and record metrics before the first and after every round.

    ``population`` is what the server resamples from each round; it defaults
    to the union of the client shards, which makes the server gradient an
    unbiased estimate of the global gradient. Train metrics are always
    evaluated on that union. Communication columns are cumulative.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; valid choices: {', '.join(ALGORITHMS)}")
    union = LabeledDataset.concat([s.data for s in shards])
    if population is None:
        population = union
    if x0 is None:
        x0 = init_params(obj, seeding.derive_rng(master_seed, seeding.MODEL_INIT))
    state = RoundState.initial(x0, hp, master_seed, algorithm)
    trace = TrainingTrace(algorithm, int(master_seed))
    comm = CommRecord()
    trace.rows.append(_metrics_row(0, obj, state.x, union, test_data, comm, state.eta_t, state.gamma_t))
    for _ in range(hp.T):
        try:
            state, rc = run_round(
                algorithm, state, obj, shards, population, hp, zero_correction=zero_correction
            )
        except (HybridFLError, FloatingPointError) as exc:
            trace.aborted = True
            raise TrainingAborted(exc, trace) from exc
        comm = comm + rc
        state = replace(
            state,
            eta_t=decay_rate(state.eta_t, hp.decay, hp.floor),
            gamma_t=decay_rate(state.gamma_t, hp.decay, hp.floor),
        )
        trace.rows.append(
            _metrics_row(state.t, obj, state.x, union, test_data, comm, state.eta_t, state.gamma_t)
        )
    trace.final_x = state.x
    return trace

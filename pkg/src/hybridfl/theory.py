"""Closed-form convergence bounds and empirical estimates of their constants.

The three ``bound_*`` functions evaluate the final non-asymptotic bounds on
``min_t E||grad f(x_t)||^2`` for CLG-SGD, FedCLG-C and FedCLG-S, split into
their additive terms, together with the learning-rate conditions under which
each bound holds.

The ``estimate_*`` functions produce *lower* bounds of the smoothness and
variance constants from finite samples; callers comparing a measured run
against a bound should inflate them first (:func:`inflate`).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .data import LabeledDataset
from .errors import BoundInputError
from .model import Objective, full_gradient, loss


@dataclass(frozen=True)
class TheoremConstants:
    L: float
    sigma: float
    sigma_g: float
    f0: float
    f_star: float

    def __post_init__(self):
        for name in ("L", "sigma", "sigma_g", "f0", "f_star"):
            if not math.isfinite(getattr(self, name)):
                raise BoundInputError(f"{name} must be finite")
        if not self.L > 0:
            raise BoundInputError("L must be > 0")
        if self.sigma < 0 or self.sigma_g < 0:
            raise BoundInputError("sigma and sigma_g must be >= 0")
        if self.f0 < self.f_star:
            raise BoundInputError(f"f0 ({self.f0}) must be >= f_star ({self.f_star})")

    @property
    def gap(self) -> float:
        return self.f0 - self.f_star


def inflate(c: TheoremConstants, factor: float = 2.0) -> TheoremConstants:
    """Scale the estimated (lower-bound) constants L, sigma, sigma_g by ``factor``."""
    return TheoremConstants(c.L * factor, c.sigma * factor, c.sigma_g * factor, c.f0, c.f_star)


@dataclass(frozen=True)
class Precondition:
    name: str
    lhs: float
    rhs: float

    @property
    def satisfied(self) -> bool:
        return self.lhs <= self.rhs


@dataclass
class BoundReport:
    algorithm: str
    terms: dict[str, float]
    preconditions: list[Precondition] = field(default_factory=list)

    @property
    def total(self) -> float:
        return math.fsum(self.terms.values())

    @property
    def preconditions_satisfied(self) -> bool:
        return all(p.satisfied for p in self.preconditions)

    @property
    def violated(self) -> list[str]:
        return [p.name for p in self.preconditions if not p.satisfied]

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "terms": dict(self.terms),
            "total": self.total,
            "preconditions_satisfied": self.preconditions_satisfied,
            "preconditions": [dict(asdict(p), satisfied=p.satisfied) for p in self.preconditions],
        }


def _rates(hp):
    eta, eta_g, gamma = float(hp.eta), float(hp.eta_g), float(hp.gamma)
    K, E, M, N, m_s = int(hp.K), int(hp.E), int(hp.M), int(hp.N), int(hp.m_s)
    if K < 0 or E < 0:
        raise BoundInputError("K and E must be >= 0")
    if K == 0 and E == 0:
        raise BoundInputError("K = 0 and E = 0 together leave the bound undefined")
    if not 1 <= M <= N:
        raise BoundInputError(f"need 1 <= M <= N, got M={M}, N={N}")
    if m_s < 1:
        raise BoundInputError("m_s must be >= 1")
    return eta, eta_g, gamma, K, E, M, N, m_s


def _preconditions(L, eta, eta_g, gamma, K, E, client_div, product_div):
    out = [
        Precondition(f"eta <= 1/({client_div}KL)", eta, 1.0 / (client_div * K * L) if K else math.inf),
        Precondition(f"eta*eta_g <= 1/({product_div}KL)", eta * eta_g,
                     1.0 / (product_div * K * L) if K else math.inf),
        Precondition("gamma <= 1/(6EL)", gamma, 1.0 / (6 * E * L) if E else math.inf),
    ]
    return out


def _participation_factor(M: int, N: int) -> float:
    if M == N:
        return 0.0
    if N < 2:
        raise BoundInputError("partial participation needs N >= 2")
    return (N - M) / (M * (N - 1))


def bound_clg_sgd(c: TheoremConstants, hp, T: int | None = None) -> BoundReport:
    """CLG-SGD bound with an explicit partial-participation term in (N - M)."""
    T = hp.T if T is None else T
    if T < 1:
        raise BoundInputError("T must be >= 1")
    eta, eta_g, gamma, K, E, M, N, m_s = _rates(hp)
    L, s2, sg2 = c.L, c.sigma ** 2, c.sigma_g ** 2
    den = 8 * gamma * E + eta * eta_g * K
    if not den > 0:
        raise BoundInputError("8*gamma*E + eta*eta_g*K must be > 0")
    terms = {
        "init_gap": 20 * c.gap / (T * den),
        "client_drift": 57 * eta**3 * eta_g * L**2 * K**3 * sg2 / den,
        "server_data": 32 * gamma**2 * E * L * s2 / (m_s * den),
        "participation": 72 * _participation_factor(M, N) * K**2 * eta**2 * eta_g**2 * L * sg2 / den,
    }
    return BoundReport("clg-sgd", terms, _preconditions(L, eta, eta_g, gamma, K, E, 3, 27))


def bound_fedclg_c(c: TheoremConstants, hp, T: int | None = None) -> BoundReport:
    """FedCLG-C bound; M enters only through the server-correction term."""
    T = hp.T if T is None else T
    if T < 1:
        raise BoundInputError("T must be >= 1")
    eta, eta_g, gamma, K, E, M, N, m_s = _rates(hp)
    L, s2, sg2 = c.L, c.sigma ** 2, c.sigma_g ** 2
    den = 6 * gamma * E + 2 * eta * eta_g * K
    if not den > 0:
        raise BoundInputError("6*gamma*E + 2*eta*eta_g*K must be > 0")
    terms = {
        "init_gap": 15 * c.gap / (T * den),
        "client_drift": 65 * eta**3 * eta_g * L**2 * K**3 * (4 * sg2 + s2 / m_s) / den,
        "server_data": 24 * gamma**2 * L * E * s2 / (m_s * den),
        "server_correction": 54 * eta**2 * eta_g**2 * K * L * s2 / (M * m_s * den),
    }
    return BoundReport("fedclg-c", terms, _preconditions(L, eta, eta_g, gamma, K, E, 6, 24))


def bound_fedclg_s(c: TheoremConstants, hp, T: int | None = None) -> BoundReport:
    """FedCLG-S bound; no term depends on N - M."""
    T = hp.T if T is None else T
    if T < 1:
        raise BoundInputError("T must be >= 1")
    eta, eta_g, gamma, K, E, M, N, m_s = _rates(hp)
    L, s2, sg2 = c.L, c.sigma ** 2, c.sigma_g ** 2
    den = 8 * gamma * E + eta * eta_g * K
    if not den > 0:
        raise BoundInputError("8*gamma*E + eta*eta_g*K must be > 0")
    terms = {
        "init_gap": 20 * c.gap / (T * den),
        "client_drift": 57 * eta**3 * eta_g * L**2 * K**3 * sg2 / den,
        "server_data": 32 * gamma**2 * E * L * s2 / (m_s * den),
        "server_correction": 72 * K * eta**2 * eta_g**2 * L * s2 / (m_s * M * den),
    }
    return BoundReport("fedclg-s", terms, _preconditions(L, eta, eta_g, gamma, K, E, 3, 27))


BOUNDS = {
    "clg-sgd": bound_clg_sgd,
    "fedclg-c": bound_fedclg_c,
    "fedclg-s": bound_fedclg_s,
}


def corollary_rates(K: int, E: int, M: int, T: int, a: float = 1.0, b: float = 1.0, c: float = 1.0):
    """Rate schedule ``eta = a/(K sqrt T)``, ``eta_g = b sqrt(MK)``, ``gamma = c/sqrt(ET)``."""
    if min(K, E, M, T) < 1:
        raise ValueError("K, E, M and T must all be >= 1")
    return a / (K * math.sqrt(T)), b * math.sqrt(M * K), c / math.sqrt(E * T)


def participation_variance(vectors, M: int) -> float:
    """Closed-form E||mean of a uniform M-subset - population mean||^2.

    Equals (N - M) / (M N (N - 1)) * sum_i ||v_i - v_bar||^2 for sampling
    without replacement.
    """
    V = np.asarray(vectors, dtype=np.float64)
    N = V.shape[0]
    if not 1 <= M <= N:
        raise ValueError(f"need 1 <= M <= N, got M={M}, N={N}")
    if M == N:
        return 0.0
    dev = V - V.mean(axis=0)
    return (N - M) / (M * N * (N - 1)) * float(np.sum(dev * dev))


def _as_datasets(parts) -> list[LabeledDataset]:
    if isinstance(parts, LabeledDataset):
        return [parts]
    return [getattr(p, "data", p) for p in parts]


def estimate_L(
    obj: Objective,
    datasets,
    num_pairs: int,
    radius: float,
    rng: np.random.Generator,
    center: np.ndarray | None = None,
) -> float:
    """Largest observed ``||grad f_i(x) - grad f_i(y)|| / ||x - y||``.

    Pairs are drawn sequentially from ``rng``, so a run with more pairs (same
    seed) sees a superset of the pairs of a shorter run. The result is a lower
    bound on the true smoothness constant.
    """
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be > 0")
    parts = _as_datasets(datasets)
    d = obj.dim
    center = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64)
    best = 0.0
    for _ in range(num_pairs):
        x = center + radius * rng.standard_normal(d) / math.sqrt(d)
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        r = radius * (1.0 - rng.random())  # in (0, radius]
        y = x + r * v
        dist = float(np.linalg.norm(x - y))
        for ds in parts:
            diff = full_gradient(obj, x, ds) - full_gradient(obj, y, ds)
            best = max(best, float(np.linalg.norm(diff)) / dist)
    return best


def global_gradient(obj: Objective, shards, x) -> np.ndarray:
    """(1/N) sum_i grad f_i(x)."""
    parts = _as_datasets(shards)
    total = np.zeros(obj.dim)
    for ds in parts:
        total = total + full_gradient(obj, x, ds)
    return total / len(parts)


def estimate_sigma_g(obj: Objective, shards, probe_points: Sequence[np.ndarray]) -> float:
    """max over probes and clients of ``||grad f_i(x) - grad f(x)||``."""
    if len(probe_points) < 1:
        raise ValueError("need at least one probe point")
    parts = _as_datasets(shards)
    worst = 0.0
    for x in probe_points:
        grads = [full_gradient(obj, x, ds) for ds in parts]
        g = np.zeros(obj.dim)
        for gi in grads:
            g = g + gi
        g = g / len(grads)
        for gi in grads:
            worst = max(worst, float(np.linalg.norm(gi - g)))
    return worst


def estimate_sigma(
    obj: Objective,
    population: LabeledDataset,
    m_s: int,
    probe: np.ndarray,
    trials: int,
    rng: np.random.Generator | None = None,
) -> float:
    """Server-variance constant: sqrt(m_s * E||grad f_s(probe) - grad f(probe)||^2).

    The expectation is over uniform size-``m_s`` draws without replacement.
    It is computed exactly by enumeration when there are at most ``trials``
    distinct subsets, and by Monte Carlo over ``trials`` draws otherwise.
    """
    if trials < 2:
        raise ValueError("trials must be >= 2")
    n = population.n
    if not 1 <= m_s <= n:
        raise ValueError(f"m_s={m_s} must be in [1, {n}]")
    if m_s == n:
        return 0.0
    g = full_gradient(obj, probe, population)
    if math.comb(n, m_s) <= trials:
        subsets = (np.array(s) for s in itertools.combinations(range(n), m_s))
        count = math.comb(n, m_s)
    else:
        if rng is None:
            raise ValueError("sampled estimate requires an rng")
        subsets = (np.sort(rng.choice(n, size=m_s, replace=False)) for _ in range(trials))
        count = trials
    acc = 0.0
    for idx in subsets:
        diff = full_gradient(obj, probe, population.subset(idx)) - g
        acc += float(diff @ diff)
    return math.sqrt(m_s * acc / count)


def estimate_f_star(
    obj: Objective,
    data: LabeledDataset,
    x0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 20000,
) -> tuple[float, np.ndarray, float]:
    """Long centralized full-batch minimisation. Returns (f*, x*, ||grad f(x*)||)."""
    x0 = np.zeros(obj.dim) if x0 is None else np.asarray(x0, dtype=np.float64)

    def fg(x):
        return loss(obj, x, data), full_gradient(obj, x, data)

    res = optimize.minimize(
        fg, x0, jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": tol * 1e-2, "ftol": 0.0, "maxcor": 30},
    )
    x = res.x
    gnorm = float(np.linalg.norm(full_gradient(obj, x, data)))
    return loss(obj, x, data), x, gnorm


def estimate_constants(
    obj: Objective,
    shards,
    m_s: int,
    x0: np.ndarray,
    rng: np.random.Generator,
    num_pairs: int = 50,
    radius: float = 1.0,
    sigma_trials: int = 200,
    probes: Sequence[np.ndarray] | None = None,
) -> TheoremConstants:
    """Estimate (L, sigma, sigma_g, f0, f*) for a partitioned problem.

    Probe points default to ``x0`` and the centralized minimiser. ``f0`` is
    the global objective at ``x0``; the population is the union of shards.
    """
    parts = _as_datasets(shards)
    union = LabeledDataset.concat(parts)
    f_star, x_star, _ = estimate_f_star(obj, union, x0)
    if probes is None:
        probes = [np.asarray(x0, dtype=np.float64), x_star]
    L = max(estimate_L(obj, parts, num_pairs, radius, rng, center=p) for p in probes)
    sigma_g = estimate_sigma_g(obj, parts, probes)
    sigma = max(estimate_sigma(obj, union, m_s, p, sigma_trials, rng) for p in probes)
    f0 = loss(obj, x0, union)
    return TheoremConstants(L, sigma, sigma_g, f0, min(f_star, f0))

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from hybridfl.data import LabeledDataset, PartitionSpec, dirichlet_partition, generate_synthetic, standardize
from hybridfl.model import Objective
from hybridfl.protocol import HyperParams

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def small_problem(num_clients=6, per_client=20, num_classes=3, input_dim=4, scheme="iid", alpha=None,
                  seed=0, l2=0.0):
    (data,) = standardize(generate_synthetic(num_classes, input_dim, num_clients * per_client, 3.0, seed))
    spec = PartitionSpec(scheme, num_clients, per_client, alpha, seed)
    shards = dirichlet_partition(data, spec, num_classes)
    obj = Objective("logistic-regression", input_dim, num_classes, l2_reg=l2)
    return obj, shards


def small_hp(**kw) -> HyperParams:
    base = dict(eta=0.1, eta_g=1.0, gamma=0.05, K=3, E=2, T=4, M=3, N=6, m_s=12,
                client_batch=None, server_batch=None, decay=0.99, floor=0.001)
    base.update(kw)
    return HyperParams(**base)


def tiny_dataset() -> LabeledDataset:
    return LabeledDataset(np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0], [3.0, -1.0]]), np.array([0, 1, 1, 0]))


# Acceptance criteria report: one PASS/FAIL line each, printed after the run.
_ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion(request):
    number = int(request.node.name.split("_")[2])

    def record(ok: bool, detail: str):
        _ACCEPTANCE[number] = ("PASS" if ok else "FAIL", detail)
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")

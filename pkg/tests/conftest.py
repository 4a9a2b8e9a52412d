import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ibpg.qap import build_relaxation, load_instance, problem_definition, reference_solve
from ibpg.schedules import ThetaSchedule, ToleranceSchedule
from ibpg.solvers import Budget, ibpg_run, vibpg_run
from ibpg.transport_oracle import SinkhornOracle, round_to_polytope

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
INSTANCES = ROOT / "instances"

# filled by the acceptance tests, printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {msg}")


@pytest.fixture(scope="session")
def grid12():
    inst = load_instance(INSTANCES / "grid12.dat")
    qp = build_relaxation(inst)
    return qp, problem_definition(qp)


@pytest.fixture(scope="session")
def grid12_ref(grid12):
    qp, _ = grid12
    res = reference_solve(qp, tol=1e-9)
    return res.x_star, res.F_star


@pytest.fixture(scope="session")
def grid12_ref_file(grid12_ref, tmp_path_factory):
    x_star, F_star = grid12_ref
    path = tmp_path_factory.mktemp("ref") / "grid12.ref.json"
    path.write_text(json.dumps({"x_star": x_star.tolist(), "F_star": F_star}))
    return path


@pytest.fixture(scope="session")
def ibpg_p31(grid12, grid12_ref):
    """iBPG, p = 3.1, 500 outer iterations, iterates retained."""
    qp, prob = grid12
    n = qp.n
    return ibpg_run(prob, SinkhornOracle(), ToleranceSchedule.power(3.1), np.ones((n, n)),
                    Budget(max_outer=500), rounding=round_to_polytope, reference=grid12_ref,
                    retain_iterates=True)


@pytest.fixture(scope="session")
def vibpg_p31(grid12, grid12_ref):
    """v-iBPG, alpha = 5, gamma = 2, p = 3.1, 500 outer iterations, iterates retained."""
    qp, prob = grid12
    n = qp.n
    X0 = np.ones((n, n))
    return vibpg_run(prob, SinkhornOracle(), ThetaSchedule("closed_form", 2.0, 5.0),
                     ToleranceSchedule.power(3.1), round_to_polytope(X0), X0, Budget(max_outer=500),
                     reference=grid12_ref, retain_iterates=True)

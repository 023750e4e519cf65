import math

import numpy as np
import pytest

from ulfnmr.sensor import SensorModel
from ulfnmr.spin_system import GYROMAGNETIC_RATIOS, MoleculeSpec, Nucleus

NANO = 1e-9
J_FORMIC = 222.2
J_ACETIC = 129.5


def ch_n(n: int, J: float, name: str = "") -> MoleculeSpec:
    """13C coupled to n equivalent protons."""
    nuclei = (Nucleus.from_isotope("13C"),) + tuple(Nucleus.from_isotope("1H") for _ in range(n))
    return MoleculeSpec(nuclei, {(0, k): J for k in range(1, n + 1)}, name)


def two_spin_lines(J: float, bz: float) -> tuple[float, float]:
    """Closed-form 13C-1H transition frequencies |1,+-1> -> singlet-like state.

    H/2pi = J I1.I2 - (v1 I1z + v2 I2z); the {up-down, down-up} block gives
    -J/4 +- sqrt(J^2 + (v1 - v2)^2)/2 and the outer triplets J/4 -+ (v1+v2)/2.
    """
    v1 = GYROMAGNETIC_RATIOS["13C"] * bz / (2 * math.pi)
    v2 = GYROMAGNETIC_RATIOS["1H"] * bz / (2 * math.pi)
    base = J / 2 + 0.5 * math.sqrt(J**2 + (v1 - v2) ** 2)
    return base - (v1 + v2) / 2, base + (v1 + v2) / 2


@pytest.fixture
def formic():
    return ch_n(1, J_FORMIC, "formic_acid")


@pytest.fixture
def acetic():
    return ch_n(3, J_ACETIC, "acetic_acid")


@pytest.fixture
def lab_sensor():
    """Default sensor with the -43.7 nT light shift of the reference sweep."""
    return SensorModel(light_shift=-43.7 * NANO)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance summary ---------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record (criterion, part, ok, detail) and assert ``ok``."""
    log = request.config.stash.setdefault(_ACCEPTANCE, {})

    def check(criterion: int, part: str, ok: bool, detail: str) -> None:
        log.setdefault(criterion, []).append((part, bool(ok), detail))
        print(f"criterion {criterion}{part}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(log):
        parts = log[crit]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{p[0] + ': ' if p[0] else ''}{'pass' if p[1] else 'FAIL'} ({p[2]})" for p in parts)
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}  {detail}")

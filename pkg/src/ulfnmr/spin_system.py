"""Liquid-state spin systems at ultralow field.

Builds the J-coupling + Zeeman Hamiltonian of a small spin-1/2 network,
diagonalizes it, prepares the prepolarized thermal state and expands the
free-evolution magnetization into discrete spectral lines.

Units: energies and Hamiltonians in rad/s (hbar = 1), fields in tesla,
couplings and line frequencies in Hz.

Phasor convention: a line with complex amplitude ``amp`` at frequency
``nu > 0`` contributes ``2 Re[amp * exp(+2j*pi*nu*t)]`` to the signal.  With
this convention ``angle(amp_x / amp_y)`` is the phase by which the x
component leads the y component in time.
"""

from __future__ import annotations

import functools
import itertools
import math
import warnings
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import constants as sc

MAX_SPINS = 8

# gamma / 2pi in MHz/T
_GAMMA_MHZ_PER_T = {
    "1H": sc.physical_constants["proton gyromag. ratio in MHz/T"][0],
    "13C": 10.7084,
    "15N": -4.3163,
    "19F": 40.0776,
    "31P": 17.2351,
}

#: Built-in gyromagnetic ratios in rad s^-1 T^-1.
GYROMAGNETIC_RATIOS: Mapping[str, float] = MappingProxyType(
    {k: 2 * math.pi * 1e6 * v for k, v in _GAMMA_MHZ_PER_T.items()}
)

_AXES = ("x", "y", "z")


class SpinSystemError(ValueError):
    """Invalid spin-system input."""


class EigensolverError(RuntimeError):
    pass


class PerturbationRangeError(ValueError):
    """Field too strong for first-order degenerate perturbation theory."""


# --------------------------------------------------------------------------
# Value types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Nucleus:
    label: str
    gyromagnetic_ratio: float
    spin: float = 0.5

    def __post_init__(self):
        if self.spin != 0.5:
            raise SpinSystemError(
                f"nucleus {self.label!r}: only spin-1/2 is supported (got {self.spin})"
            )
        g = self.gyromagnetic_ratio
        if not math.isfinite(g) or g == 0.0:
            raise SpinSystemError(
                f"nucleus {self.label!r}: gyromagnetic ratio must be finite and nonzero"
            )

    @classmethod
    def from_isotope(cls, label: str, gyromagnetic_ratio: Optional[float] = None) -> "Nucleus":
        """Nucleus with the built-in gyromagnetic ratio unless overridden."""
        if gyromagnetic_ratio is None:
            try:
                gyromagnetic_ratio = GYROMAGNETIC_RATIOS[label]
            except KeyError:
                raise SpinSystemError(
                    f"unknown isotope {label!r}; supply gyromagnetic_ratio explicitly"
                ) from None
        return cls(label, float(gyromagnetic_ratio))


@dataclass(frozen=True)
class MoleculeSpec:
    """Spin-1/2 nuclei and their scalar couplings.

    ``j_couplings`` maps index pairs ``(i, j)`` to J in Hz.  Keys are
    normalized to ``i < j``; missing pairs are uncoupled.
    """

    nuclei: tuple[Nucleus, ...]
    j_couplings: Mapping[tuple[int, int], float] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        nuclei = tuple(self.nuclei)
        n = len(nuclei)
        if not 1 <= n <= MAX_SPINS:
            raise SpinSystemError(f"need 1..{MAX_SPINS} nuclei, got {n}")
        couplings: dict[tuple[int, int], float] = {}
        for (i, j), value in dict(self.j_couplings).items():
            i, j = int(i), int(j)
            if i == j:
                raise SpinSystemError(f"self-coupling J({i},{j}) is not allowed")
            if not (0 <= i < n and 0 <= j < n):
                raise SpinSystemError(f"coupling ({i},{j}) refers to a missing nucleus")
            key = (min(i, j), max(i, j))
            value = float(value)
            if not math.isfinite(value):
                raise SpinSystemError(f"J{key} is not finite")
            if key in couplings and couplings[key] != value:
                raise SpinSystemError(f"conflicting values for J{key}")
            couplings[key] = value
        object.__setattr__(self, "nuclei", nuclei)
        object.__setattr__(self, "j_couplings", MappingProxyType(couplings))

    def __reduce__(self):
        # mappingproxy does not pickle; rebuild from a plain dict
        return (type(self), (self.nuclei, dict(self.j_couplings), self.name))

    @property
    def n_spins(self) -> int:
        return len(self.nuclei)

    @property
    def dimension(self) -> int:
        return 2**self.n_spins

    @property
    def gammas(self) -> NDArray[np.float64]:
        return np.array([nuc.gyromagnetic_ratio for nuc in self.nuclei])

    def coupling(self, i: int, j: int) -> float:
        return self.j_couplings.get((min(i, j), max(i, j)), 0.0)

    def with_negated_gammas(self) -> "MoleculeSpec":
        """Same molecule with every gyromagnetic ratio sign-flipped."""
        nuclei = tuple(replace(nuc, gyromagnetic_ratio=-nuc.gyromagnetic_ratio) for nuc in self.nuclei)
        return MoleculeSpec(nuclei, dict(self.j_couplings), self.name)

    def equivalent_group(self, label: str = "1H") -> Optional[tuple[int, ...]]:
        """Indices of the ``label`` nuclei if they are magnetically equivalent.

        Equivalent means identical gyromagnetic ratios and identical
        couplings to every nucleus outside the group.  Returns None when
        there are no such nuclei or they are not equivalent.
        """
        group = tuple(i for i, nuc in enumerate(self.nuclei) if nuc.label == label)
        if not group:
            return None
        if len({self.nuclei[i].gyromagnetic_ratio for i in group}) != 1:
            return None
        others = [m for m in range(self.n_spins) if m not in group]
        for m in others:
            if len({self.coupling(i, m) for i in group}) != 1:
                return None
        return group


@dataclass(frozen=True)
class FieldConfig:
    B: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        b = tuple(float(c) for c in self.B)
        if len(b) != 3 or not all(math.isfinite(c) for c in b):
            raise SpinSystemError(f"field must be a finite 3-vector, got {self.B!r}")
        object.__setattr__(self, "B", b)

    @classmethod
    def along_z(cls, bz: float) -> "FieldConfig":
        return cls((0.0, 0.0, bz))

    @property
    def is_axial(self) -> bool:
        return self.B[0] == 0.0 and self.B[1] == 0.0


@dataclass(frozen=True)
class PolarizationConfig:
    """Prepolarizing field, sample temperature and guide-field axis."""

    B_p: float = 1.3
    T: float = 298.0
    guide_axis: str = "y"

    def __post_init__(self):
        if not self.B_p > 0:
            raise SpinSystemError("prepolarizing field B_p must be positive")
        if not self.T > 0:
            raise SpinSystemError("temperature T must be positive")
        if self.guide_axis not in _AXES:
            raise SpinSystemError(f"guide_axis must be one of x/y/z, got {self.guide_axis!r}")


class StateLabel(NamedTuple):
    f: float
    m_f: float
    k: Optional[float] = None

    def __str__(self) -> str:
        def q(x: float) -> str:
            return str(int(round(x))) if abs(x - round(x)) < 1e-9 else f"{int(round(2 * x))}/2"

        core = f"|{q(self.f)},{q(self.m_f)}>"
        return core if self.k is None else f"k={q(self.k)}{core}"


@dataclass(frozen=True)
class EigenSystem:
    """Ascending eigenvalues (rad/s) and unitary eigenvector matrix (columns)."""

    eigenvalues: NDArray[np.float64]
    eigenvectors: NDArray[np.complex128]
    labels: Optional[tuple[StateLabel, ...]] = None
    label_overlaps: Optional[NDArray[np.float64]] = None
    label_ties: tuple[tuple[int, ...], ...] = ()

    @property
    def dimension(self) -> int:
        return len(self.eigenvalues)

    def label(self, index: int) -> str:
        if self.labels is None:
            return f"#{index}"
        return str(self.labels[index])


# --------------------------------------------------------------------------
# Operators
# --------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _spin_operators(n: int) -> NDArray[np.complex128]:
    half = 0.5 * np.array(
        [
            [[0, 1], [1, 0]],
            [[0, -1j], [1j, 0]],
            [[1, 0], [0, -1]],
        ],
        dtype=complex,
    )
    ops = np.empty((n, 3, 2**n, 2**n), dtype=complex)
    for j in range(n):
        left = np.eye(2**j)
        right = np.eye(2 ** (n - j - 1))
        for a in range(3):
            ops[j, a] = np.kron(np.kron(left, half[a]), right)
    ops.setflags(write=False)
    return ops


def spin_operators(n: int) -> NDArray[np.complex128]:
    """Array ``ops[j, a]`` of single-spin operators I_ja (a = x, y, z) on n spins."""
    if not 1 <= n <= MAX_SPINS:
        raise SpinSystemError(f"need 1..{MAX_SPINS} spins, got {n}")
    return _spin_operators(n)


def total_spin(molecule: MoleculeSpec, indices: Optional[Iterable[int]] = None) -> NDArray[np.complex128]:
    """Components (3, d, d) of the summed angular momentum over ``indices``."""
    ops = spin_operators(molecule.n_spins)
    idx = list(range(molecule.n_spins)) if indices is None else list(indices)
    return ops[idx].sum(axis=0)


def squared(vector_op: NDArray[np.complex128]) -> NDArray[np.complex128]:
    return sum(c @ c for c in vector_op)


def magnetization_operators(molecule: MoleculeSpec, scale: float = 1.0) -> NDArray[np.complex128]:
    """``scale * sum_j gamma_j I_j`` as a (3, d, d) array."""
    ops = spin_operators(molecule.n_spins)
    return scale * np.einsum("j,jaxy->axy", molecule.gammas, ops)


def build_hamiltonian(molecule: MoleculeSpec, field: FieldConfig = FieldConfig()) -> NDArray[np.complex128]:
    """H = sum_{i<j} 2 pi J_ij I_i.I_j - sum_j gamma_j I_j.B  (rad/s)."""
    ops = spin_operators(molecule.n_spins)
    d = molecule.dimension
    H = np.zeros((d, d), dtype=complex)
    for (i, j), J in molecule.j_couplings.items():
        if J:
            H += 2 * np.pi * J * np.einsum("axy,ayz->xz", ops[i], ops[j])
    B = np.asarray(field.B)
    if np.any(B):
        H -= np.einsum("j,a,jaxy->xy", molecule.gammas, B, ops)
    # symmetrize away rounding so H == H^dagger exactly
    return 0.5 * (H + H.conj().T)


def _clusters(values: NDArray[np.float64], tol: float) -> list[NDArray[np.intp]]:
    """Split sorted values into runs whose neighbours differ by at most tol."""
    if len(values) == 0:
        return []
    breaks = np.nonzero(np.diff(values) > tol)[0] + 1
    return np.split(np.arange(len(values)), breaks)


# generic incommensurate weights so that distinct quantum-number tuples
# never collide in the combined operator
_ADAPT_WEIGHTS = (1.0, 0.1 * math.sqrt(2.0), 0.01 * math.sqrt(3.0), 0.001 * math.sqrt(5.0))


def eigendecompose(
    H: NDArray[np.complex128],
    commuting: Sequence[NDArray[np.complex128]] = (),
    degeneracy_tol: float = 1e-9,
) -> EigenSystem:
    """Diagonalize a Hermitian matrix.

    Within each degenerate eigenvalue cluster (relative width
    ``degeneracy_tol``) the basis is rotated to diagonalize the given
    commuting operators, so degenerate states come out as simultaneous
    eigenstates (e.g. of F_z) instead of arbitrary mixtures.
    """
    H = np.asarray(H, dtype=complex)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise SpinSystemError(f"expected a square matrix, got shape {H.shape}")
    scale = max(1.0, float(np.max(np.abs(H))) if H.size else 1.0)
    if np.max(np.abs(H - H.conj().T), initial=0.0) > 1e-12 * scale:
        raise SpinSystemError("matrix is not Hermitian")
    try:
        E, V = np.linalg.eigh(H)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(str(exc)) from exc
    if commuting:
        V = V.copy()
        combo = sum(w * np.asarray(op) for w, op in zip(_ADAPT_WEIGHTS, commuting))
        for cluster in _clusters(E, degeneracy_tol * scale):
            if len(cluster) < 2:
                continue
            sub = V[:, cluster]
            block = sub.conj().T @ combo @ sub
            _, W = np.linalg.eigh(0.5 * (block + block.conj().T))
            V[:, cluster] = sub @ W
            E[cluster] = E[cluster].mean()
    return EigenSystem(E, V)


# --------------------------------------------------------------------------
# Zero-field labels
# --------------------------------------------------------------------------


def _quantum_number_from_square(expect: float) -> float:
    """Solve q(q+1) = expect for q >= 0."""
    return 0.5 * (-1.0 + math.sqrt(max(1.0 + 4.0 * expect, 0.0)))


def _snap_half(x: float) -> float:
    return round(2.0 * x) / 2.0


def zero_field_basis(molecule: MoleculeSpec) -> tuple[EigenSystem, list[StateLabel]]:
    """Zero-field eigenstates adapted to F^2, F_z and (if defined) K^2."""
    F = total_spin(molecule)
    group = molecule.equivalent_group("1H")
    ops = [F[2], squared(F)]
    K2 = None
    if group is not None:
        K2 = squared(total_spin(molecule, group))
        ops.append(K2)
    es = eigendecompose(build_hamiltonian(molecule), commuting=ops)
    V = es.eigenvectors
    fz = np.real(np.einsum("xa,xy,ya->a", V.conj(), F[2], V))
    f2 = np.real(np.einsum("xa,xy,ya->a", V.conj(), ops[1], V))
    labels = []
    for a in range(es.dimension):
        f = _quantum_number_from_square(f2[a])
        k = None
        if K2 is not None:
            k2 = float(np.real(V[:, a].conj() @ K2 @ V[:, a]))
            k = _snap_half(_quantum_number_from_square(k2))
        labels.append(StateLabel(_snap_half(f), _snap_half(fz[a]), k))
    return es, labels


def label_zero_field_states(
    es: EigenSystem,
    molecule: MoleculeSpec,
    tie_tolerance: float = 1e-6,
) -> EigenSystem:
    """Attach |f, m_f> (and manifold k) labels by overlap with zero-field states.

    The overlap of each state with a label is summed over all zero-field
    states carrying that label, which makes repeated manifolds (e.g. the
    two k=1/2 copies in CH3) unambiguous.  Ties are broken by ascending
    m_f, recorded in ``label_ties`` and reported with a warning.
    """
    if es.dimension != molecule.dimension:
        raise SpinSystemError("eigensystem and molecule dimensions differ")
    F = total_spin(molecule)
    # re-adapt degenerate clusters of the supplied system to F_z first
    adapted = eigendecompose(
        es.eigenvectors @ np.diag(es.eigenvalues) @ es.eigenvectors.conj().T,
        commuting=[F[2]],
    )
    V = adapted.eigenvectors
    zf, zlabels = zero_field_basis(molecule)
    distinct = sorted(set(zlabels), key=lambda lab: (lab.m_f, lab.f, lab.k or 0.0))
    overlaps = np.abs(zf.eigenvectors.conj().T @ V) ** 2  # [zero-field, state]
    per_label = np.array(
        [overlaps[[i for i, z in enumerate(zlabels) if z == lab]].sum(axis=0) for lab in distinct]
    )
    labels: list[StateLabel] = []
    best = np.empty(es.dimension)
    ties = []
    for a in range(es.dimension):
        col = per_label[:, a]
        top = col.max()
        candidates = [i for i in np.argsort(-col, kind="stable") if top - col[i] <= tie_tolerance]
        if len(candidates) > 1:
            ties.append(tuple([a] + candidates))
            candidates.sort(key=lambda i: distinct[i].m_f)
        labels.append(distinct[candidates[0]])
        best[a] = top
    if ties:
        warnings.warn(f"ambiguous zero-field labels for states {[t[0] for t in ties]}", stacklevel=2)
    return EigenSystem(adapted.eigenvalues, V, tuple(labels), best, tuple(ties))


# --------------------------------------------------------------------------
# Initial state
# --------------------------------------------------------------------------


def polarization_factors(molecule: MoleculeSpec, pol: PolarizationConfig) -> NDArray[np.float64]:
    """High-temperature polarization epsilon_j = hbar gamma_j B_p / (k_B T)."""
    return sc.hbar * molecule.gammas * pol.B_p / (sc.k * pol.T)


def thermal_initial_state(molecule: MoleculeSpec, pol: PolarizationConfig = PolarizationConfig()) -> NDArray[np.complex128]:
    """rho_0 = (1 + sum_j eps_j I_j,guide) / 2^n."""
    ops = spin_operators(molecule.n_spins)
    axis = _AXES.index(pol.guide_axis)
    eps = polarization_factors(molecule, pol)
    d = molecule.dimension
    return (np.eye(d) + np.einsum("j,jxy->xy", eps, ops[:, axis])) / d


# --------------------------------------------------------------------------
# Spectral lines
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Line:
    """One spectral line of the transverse/longitudinal magnetization.

    ``bra_label``/``ket_label`` name the upper/lower state of the dominant
    coherence; ``coherences`` lists every (upper, lower) eigenstate index
    pair merged into this line.
    """

    frequency_hz: float
    amp_x: complex
    amp_y: complex
    amp_z: complex
    bra_label: str
    ket_label: str
    coherences: tuple[tuple[int, int], ...] = ()

    def amplitude(self, axis: str) -> complex:
        return {"x": self.amp_x, "y": self.amp_y, "z": self.amp_z}[axis]

    @property
    def theta(self) -> float:
        """Phase of the x component relative to the y component (rad)."""
        return float(np.angle(self.amp_x / self.amp_y))


@dataclass(frozen=True)
class LineSource:
    """Eigenbasis data a LineSet was computed from."""

    eigenvalues: NDArray[np.float64]
    eigenvectors: NDArray[np.complex128]
    rho0: NDArray[np.complex128]
    observables: NDArray[np.complex128]  # (3, d, d) lab-frame magnetization
    fz: NDArray[np.complex128]


@dataclass(frozen=True)
class LineSet:
    lines: tuple[Line, ...]
    dc: tuple[float, float, float] = (0.0, 0.0, 0.0)
    source: Optional[LineSource] = field(default=None, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.lines)

    def __iter__(self):
        return iter(self.lines)

    @property
    def frequencies(self) -> NDArray[np.float64]:
        return np.array([ln.frequency_hz for ln in self.lines])

    def amplitudes(self, axis: str) -> NDArray[np.complex128]:
        return np.array([ln.amplitude(axis) for ln in self.lines], dtype=complex)

    def select(self, fmin: float, fmax: float) -> "LineSet":
        keep = tuple(ln for ln in self.lines if fmin <= ln.frequency_hz <= fmax)
        return replace(self, lines=keep)

    def magnetization(self, t, axis: str) -> NDArray[np.float64]:
        """Reconstruct M_axis(t) from the static part and the lines."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.full(t.shape, self.dc[_AXES.index(axis)])
        if self.lines:
            phase = np.exp(2j * np.pi * np.outer(t, self.frequencies))
            out = out + 2 * np.real(phase @ self.amplitudes(axis))
        return out


def line_decomposition(
    es: EigenSystem,
    rho0: NDArray[np.complex128],
    molecule: MoleculeSpec,
    *,
    scale: float = 1.0,
    amplitude_floor: float = 1e-12,
    merge_width_hz: float = 1e-6,
) -> LineSet:
    """Expand M(t) = scale * sum_j gamma_j Tr[rho(t) I_j] into lines.

    For every eigenpair with E_a > E_b the line amplitude is
    ``<b|rho0|a><a|M|b>`` (coefficient of exp(+i w_ab t)).  Coherences
    closer than ``merge_width_hz`` are summed; lines whose three
    amplitudes all fall below ``amplitude_floor`` times the largest
    amplitude are dropped.
    """
    rho0 = np.asarray(rho0)
    d = es.dimension
    if rho0.shape != (d, d) or molecule.dimension != d:
        raise SpinSystemError(
            f"dimension mismatch: eigensystem {d}, rho0 {rho0.shape}, molecule {molecule.dimension}"
        )
    U = es.eigenvectors
    M = magnetization_operators(molecule, scale)
    rho_e = U.conj().T @ rho0 @ U
    # the identity part of rho0 carries no coherence; drop it so rounding
    # from 1/d does not seed spurious lines
    rho_dev = U.conj().T @ (rho0 - np.trace(rho0) / d * np.eye(d)) @ U
    M_e = np.einsum("xa,cxy,yb->cab", U.conj(), M, U)

    nu = (es.eigenvalues[:, None] - es.eigenvalues[None, :]) / (2 * np.pi)  # nu[a, b]
    static = np.abs(nu) <= merge_width_hz
    dc = tuple(float(np.real(np.sum(rho_e.T * M_e[c] * static))) for c in range(3))

    upper, lower = np.nonzero(nu > merge_width_hz)
    amps = rho_dev[lower, upper][None, :] * M_e[:, upper, lower]  # (3, pairs)
    freqs = nu[upper, lower]
    order = np.argsort(freqs, kind="stable")
    freqs, upper, lower, amps = freqs[order], upper[order], lower[order], amps[:, order]

    peak = float(np.max(np.abs(amps), initial=0.0))
    lines = []
    if peak > 0.0:
        for group in _clusters(freqs, merge_width_hz):
            total = amps[:, group].sum(axis=1)
            if np.all(np.abs(total) < amplitude_floor * peak):
                continue
            weights = np.abs(amps[:, group]).sum(axis=0)
            dom = group[int(np.argmax(weights))]
            lines.append(
                Line(
                    frequency_hz=float(freqs[group].mean()),
                    amp_x=complex(total[0]),
                    amp_y=complex(total[1]),
                    amp_z=complex(total[2]),
                    bra_label=es.label(int(upper[dom])),
                    ket_label=es.label(int(lower[dom])),
                    coherences=tuple((int(upper[g]), int(lower[g])) for g in group),
                )
            )
    source = LineSource(es.eigenvalues, U, rho0, M, total_spin(molecule)[2])
    return LineSet(tuple(lines), dc, source)


def molecule_lines(
    molecule: MoleculeSpec,
    field: FieldConfig,
    pol: PolarizationConfig = PolarizationConfig(),
    *,
    label: bool = False,
    **kwargs,
) -> LineSet:
    """Hamiltonian -> eigensystem -> thermal state -> lines in one call."""
    H = build_hamiltonian(molecule, field)
    Fz = total_spin(molecule)[2]
    es = eigendecompose(H, commuting=[Fz] if field.is_axial else ())
    if label:
        es = label_zero_field_states(es, molecule)
    return line_decomposition(es, thermal_initial_state(molecule, pol), molecule, **kwargs)


def evolve_magnetization(
    molecule: MoleculeSpec,
    H: NDArray[np.complex128],
    rho0: NDArray[np.complex128],
    times,
    axis: str,
    scale: float = 1.0,
) -> NDArray[np.float64]:
    """Brute-force Tr[exp(-iHt) rho0 exp(iHt) M_axis] by matrix exponentials."""
    from scipy.linalg import expm

    M = magnetization_operators(molecule, scale)[_AXES.index(axis)]
    out = []
    for t in np.atleast_1d(times):
        U = expm(-1j * H * t)
        out.append(np.real(np.trace(U @ rho0 @ U.conj().T @ M)))
    return np.array(out)


# --------------------------------------------------------------------------
# First-order degenerate perturbation theory (oracle for the exact path)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbativeLine:
    frequency_hz: float
    upper_manifold: int
    lower_manifold: int
    upper_label: StateLabel
    lower_label: StateLabel
    zero_field_gap_hz: float


def perturbative_frequencies(
    molecule: MoleculeSpec,
    B_z: float,
    *,
    include_intra_manifold: bool = False,
    validity_ratio: float = 0.1,
) -> list[PerturbativeLine]:
    """Line frequencies from first-order degenerate perturbation theory.

    The Zeeman term is projected onto each degenerate zero-field manifold
    and diagonalized there; transition frequencies are zero-field gaps
    plus the resulting first-order shifts.  Only transitions with a
    nonzero transverse-magnetization matrix element are returned.
    """
    gammas = molecule.gammas
    couplings = [abs(J) for J in molecule.j_couplings.values() if J]
    if couplings:
        zeeman = float(np.max(np.abs(gammas))) * abs(B_z) / (2 * np.pi)
        if zeeman >= validity_ratio * min(couplings):
            raise PerturbationRangeError(
                f"Zeeman scale {zeeman:.4g} Hz is not small against J_min = {min(couplings):.4g} Hz"
            )
    zf, zlabels = zero_field_basis(molecule)
    E0 = zf.eigenvalues
    scale = max(1.0, float(np.max(np.abs(E0))))
    manifolds = _clusters(E0, 1e-9 * scale)

    ops = spin_operators(molecule.n_spins)
    V = -B_z * np.einsum("j,jxy->xy", gammas, ops[:, 2])
    energies, vectors, owner, labels = [], [], [], []
    for m_idx, cluster in enumerate(manifolds):
        sub = zf.eigenvectors[:, cluster]
        block = sub.conj().T @ V @ sub
        shift, W = np.linalg.eigh(0.5 * (block + block.conj().T))
        for s, w in zip(shift, W.T):
            energies.append(E0[cluster].mean() + s)
            vec = sub @ w
            vectors.append(vec)
            owner.append(m_idx)
            # dominant zero-field label inside the manifold
            labels.append(zlabels[cluster[int(np.argmax(np.abs(w)))]])
    vectors = np.array(vectors).T
    M = magnetization_operators(molecule)
    Mplus = vectors.conj().T @ (M[0] + 1j * M[1]) @ vectors
    Mminus = vectors.conj().T @ (M[0] - 1j * M[1]) @ vectors
    threshold = 1e-9 * max(float(np.max(np.abs(Mplus))), 1e-300)
    manifold_energy = [E0[c].mean() for c in manifolds]

    out = []
    seen = set()
    for a, b in itertools.permutations(range(len(energies)), 2):
        if energies[a] <= energies[b]:
            continue
        same = owner[a] == owner[b]
        if same and not include_intra_manifold:
            continue
        if max(abs(Mplus[a, b]), abs(Mminus[a, b])) < threshold:
            continue
        gap = (manifold_energy[owner[a]] - manifold_energy[owner[b]]) / (2 * np.pi)
        freq = (energies[a] - energies[b]) / (2 * np.pi)
        # repeated manifolds (e.g. two k=1/2 copies) give identical lines
        key = (round(freq, 9), labels[a], labels[b])
        if key in seen:
            continue
        seen.add(key)
        out.append(
            PerturbativeLine(
                frequency_hz=freq,
                upper_manifold=owner[a],
                lower_manifold=owner[b],
                upper_label=labels[a],
                lower_label=labels[b],
                zero_field_gap_hz=gap,
            )
        )
    out.sort(key=lambda ln: ln.frequency_hz)
    return out

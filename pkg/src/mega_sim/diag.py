"""Density-matrix diagnostics: partial traces, trace distance, eigenstate tables."""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .eig import FullSpectrum, SectorSpectrum
from .ensemble import DiagonalState, PureState, WeightedEnsemble
from .errors import DomainError, ResourceError
from .fock import build_sector_basis, popcount
from .model import SparseOperator, build_hamiltonian, build_observable

MAX_SUBSYSTEM_SITES = 6
TOL = 1e-10


@dataclass(frozen=True)
class SubsystemSpec:
    """Contiguous sites ``[start, stop)``, both spin species included."""

    start: int
    stop: int

    def __post_init__(self):
        if not 0 <= self.start < self.stop:
            raise DomainError(f"invalid site range [{self.start}, {self.stop})")

    @property
    def size(self) -> int:
        return self.stop - self.start

    def orbitals(self, L: int) -> tuple[int, ...]:
        if self.stop > L:
            raise DomainError(f"site range [{self.start}, {self.stop}) exceeds L={L}")
        sites = range(self.start, self.stop)
        return tuple(sites) + tuple(s + L for s in sites)


@dataclass
class DensityMatrix:
    """Density matrix over the occupation basis of ``modes``.

    Basis index ``k`` has mode ``modes[q]`` occupied when bit ``q`` of ``k`` is
    set; the fermionic ordering follows ``modes``.
    """

    modes: tuple
    matrix: np.ndarray

    def __post_init__(self):
        self.modes = tuple(int(m) for m in self.modes)
        M = np.asarray(self.matrix)
        if M.shape != (1 << len(self.modes),) * 2:
            raise DomainError(f"matrix shape {M.shape} does not match {len(self.modes)} modes")
        if np.abs(M - M.conj().T).max() > TOL:
            raise DomainError("density matrix is not Hermitian")
        if abs(np.trace(M) - 1) > TOL:
            raise DomainError(f"density matrix trace {np.trace(M).real!r} != 1")
        if np.linalg.eigvalsh(M).min() < -TOL:
            raise DomainError("density matrix has a negative eigenvalue")
        self.matrix = M

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)


# ------------------------------------------------------------------ sources

def _components(source, spectra: FullSpectrum | None):
    """Per-sector matrices ``Psi`` with ``rho_sector = Psi Psi^dagger`` in the occupation basis."""
    out: dict[tuple, list] = {}
    if isinstance(source, PureState):
        out[source.sector] = [source.amplitudes[:, None]]
    elif isinstance(source, WeightedEnsemble):
        for w, psi in source.entries:
            if w > 0:
                out.setdefault(psi.sector, []).append(np.sqrt(w) * psi.amplitudes[:, None])
    elif isinstance(source, DiagonalState):
        if spectra is None:
            raise DomainError("diagonal states need the spectra to expand")
        for lab in source.labels():
            V = spectra[lab].eigenvectors
            w = source.weights[lab].copy()
            cols = []
            for lo, hi, R in source.blocks.get(lab, ()):
                lam, u = np.linalg.eigh(R)
                keep = lam > 0
                cols.append((V[:, lo:hi] @ u[:, keep]) * np.sqrt(lam[keep]))
                w[lo:hi] = 0
            nz = np.nonzero(w > 0)[0]
            cols.append(V[:, nz] * np.sqrt(w[nz]))
            out[lab] = cols
    else:
        raise DomainError(f"unsupported source type {type(source).__name__}")
    return {lab: np.hstack(c) for lab, c in out.items()}


def _sector_split(L: int, label, orbs: tuple):
    """Subsystem index, complement bits and reordering sign for each basis state."""
    basis = build_sector_basis(L, *label)
    bits = basis.bits
    amask = 0
    for o in orbs:
        amask |= 1 << o
    bmask = ((1 << (2 * L)) - 1) & ~amask
    ia = np.zeros(bits.size, dtype=np.int64)
    parity = np.zeros(bits.size, dtype=np.int64)
    for q, o in enumerate(orbs):
        occ = (bits >> o) & 1
        ia |= occ << q
        # moving mode o ahead of the occupied complement modes below it
        parity += occ * popcount(bits & bmask & ((1 << o) - 1))
    sign = 1 - 2 * (parity & 1)
    return ia, bits & bmask, sign


def reduced_density_matrix(source, spectra: FullSpectrum | None, sub: SubsystemSpec,
                           L: int | None = None) -> DensityMatrix:
    """Fermionic partial trace onto the modes of ``sub``.

    Each basis state is written as ``sign * |a>|b>`` with the subsystem modes
    moved to the front of the operator string.  Within one particle sector the
    rows of fixed subsystem particle numbers form a complete product of
    subsystem and complement configurations, so each block of the result is
    a dense contraction.  Sources are sector-diagonal, hence the result is
    block-diagonal in subsystem particle numbers by construction.
    """
    if L is None:
        L = spectra.params.L if spectra is not None else source.L
    if sub.size > MAX_SUBSYSTEM_SITES:
        raise ResourceError(f"subsystem of {sub.size} sites exceeds 4^{MAX_SUBSYSTEM_SITES} states")
    orbs = sub.orbitals(L)
    m = len(orbs)
    rho = np.zeros((1 << m, 1 << m), dtype=complex)
    for lab, psi in _components(source, spectra).items():
        ia, ib, sign = _sector_split(L, lab, orbs)
        amp = psi * sign[:, None]
        na = popcount(ia & ((1 << (m // 2)) - 1)) * 64 + popcount(ia >> (m // 2))
        for key in np.unique(na):
            rows = np.nonzero(na == key)[0]
            ua, ra = np.unique(ia[rows], return_inverse=True)
            ub, rb = np.unique(ib[rows], return_inverse=True)
            if ua.size * ub.size != rows.size:
                raise AssertionError("sector rows do not factorise over the subsystem")
            T = np.zeros((ua.size, ub.size, amp.shape[1]), dtype=complex)
            T[ra, rb] = amp[rows]
            T = T.reshape(ua.size, -1)
            rho[np.ix_(ua, ua)] += T @ T.conj().T
    return DensityMatrix(orbs, rho)


def trace_distance(a: DensityMatrix, b: DensityMatrix) -> float:
    """Half the trace norm of ``a - b``."""
    if a.modes != b.modes:
        raise DomainError(f"mode labels differ: {a.modes} vs {b.modes}")
    return float(0.5 * np.abs(np.linalg.eigvalsh(a.matrix - b.matrix)).sum())


def state_trace_distance(a, b, spectra: FullSpectrum | None) -> float:
    """Trace distance of two full-system states, evaluated sector by sector."""
    ca, cb = _components(a, spectra), _components(b, spectra)
    total = 0.0
    for lab in set(ca) | set(cb):
        dim = (ca.get(lab) if lab in ca else cb[lab]).shape[0]
        diff = np.zeros((dim, dim), dtype=complex)
        if lab in ca:
            diff += ca[lab] @ ca[lab].conj().T
        if lab in cb:
            diff -= cb[lab] @ cb[lab].conj().T
        total += np.abs(np.linalg.eigvalsh(diff)).sum()
    return float(0.5 * total)


# ---------------------------------------------------------------- observables

def _operator_for(O, label, L: int) -> SparseOperator | None:
    if isinstance(O, SparseOperator):
        return O if tuple(O.sector_in) == tuple(label) else None
    if isinstance(O, Mapping):
        return O.get(tuple(label))
    if isinstance(O, str):
        return build_observable(O, build_sector_basis(L, *label))
    if callable(O):
        return O(build_sector_basis(L, *label))
    raise DomainError(f"unsupported observable {O!r}")


def _check_diagonal_op(op: SparseOperator, label):
    if tuple(op.sector_in) != tuple(label) or tuple(op.sector_out) != tuple(label):
        raise DomainError(f"observable maps {op.sector_in} -> {op.sector_out}, need {label}")


def _real_if_hermitian(x: complex, tol: float = TOL):
    return float(x.real) if abs(x.imag) <= tol * max(1.0, abs(x)) else complex(x)


def expectation(source, O, spectra: FullSpectrum | None = None, L: int | None = None):
    """``Tr(rho O)`` for pure states, ensembles and diagonal states.

    ``O`` is a sector-diagonal ``SparseOperator``, a mapping from sector
    label to operator, an observable name understood by ``build_observable``
    or a callable ``basis -> SparseOperator``.
    """
    if L is None:
        L = spectra.params.L if spectra is not None else source.L
    total = 0j
    for lab, psi in _components(source, spectra).items():
        op = _operator_for(O, lab, L)
        if op is None:
            raise DomainError(f"no observable supplied for sector {lab}")
        _check_diagonal_op(op, lab)
        total += np.vdot(psi, op.matrix @ psi)
    return _real_if_hermitian(total)


@dataclass
class EthTable:
    """Eigenstate expectation values: one row per eigenstate."""

    energies: np.ndarray
    values: np.ndarray
    sectors: list
    names: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(["n_up", "n_dn", "E"] + list(self.names)) + "\n")
        for lab, e, row in zip(self.sectors, self.energies, self.values):
            buf.write(",".join([str(lab[0]), str(lab[1])] + [format(x, ".17g") for x in (e, *row)]) + "\n")
        return buf.getvalue()


def _block_averaged_diagonal(spec: SectorSpectrum, op: SparseOperator) -> np.ndarray:
    V = spec.eigenvectors
    diag = np.einsum("ij,ij->j", V.conj(), op.matrix @ V).real
    for idx in spec.degenerate_blocks():
        if idx.size > 1:
            diag[idx] = diag[idx].mean()
    return diag


def eth_scatter(spectra: FullSpectrum, observables, sectors=None, names=None) -> EthTable:
    """Diagonal matrix elements of each observable in every eigenstate of the chosen sectors.

    Degenerate eigenstates share the block average, which does not depend
    on the basis chosen inside the block.  ``"H"`` as an observable yields
    the Hamiltonian itself.
    """
    L = spectra.params.L
    labels = [tuple(s) for s in sectors] if sectors is not None else spectra.labels()
    if names is None:
        names = [o if isinstance(o, str) else f"O{k}" for k, o in enumerate(observables)]
    es, vals, labs = [], [], []
    for lab in labels:
        spec = spectra[lab]
        cols = []
        for O in observables:
            if isinstance(O, str) and O == "H":
                op = build_hamiltonian(spectra.params, build_sector_basis(L, *lab))
            else:
                op = _operator_for(O, lab, L)
            if op is None:
                raise DomainError(f"no observable supplied for sector {lab}")
            _check_diagonal_op(op, lab)
            cols.append(_block_averaged_diagonal(spec, op))
        es.append(spec.energies)
        vals.append(np.column_stack(cols) if cols else np.zeros((spec.dim, 0)))
        labs.extend([lab] * spec.dim)
    return EthTable(np.concatenate(es), np.vstack(vals), labs, list(names))


def monotonicity_violations(x, y, decreasing: bool = True, tol: float = 1e-12) -> int:
    """Number of adjacent pairs (sorted by ``x``) breaking the expected monotone trend."""
    order = np.argsort(x, kind="stable")
    d = np.diff(np.asarray(y)[order])
    return int(np.sum(d > tol) if decreasing else np.sum(d < -tol))


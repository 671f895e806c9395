"""Sparse sector-restricted matrices for the (extended) Hubbard chain."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import sparse

from .errors import DomainError
from .fock import (
    OrbitalIndex,
    SectorBasis,
    build_sector_basis,
    hop_action,
    ladder_action,
    occupations,
    popcount,
    spin_index,
)


@dataclass(frozen=True)
class ModelParams:
    """Hubbard chain with optional integrability-breaking terms.

    All energies are in units of the hopping ``t`` (which defaults to 1).
    ``t_prime`` is the next-nearest-neighbour hopping and ``u_prime`` the
    nearest-neighbour density-density repulsion ``N_i N_{i+1}``.
    """

    L: int
    U: float = 0.0
    t: float = 1.0
    t_prime: float = 0.0
    u_prime: float = 0.0
    boundary: str = "periodic"

    def __post_init__(self):
        if not isinstance(self.L, (int, np.integer)) or self.L < 1:
            raise DomainError(f"L must be a positive integer, got {self.L!r}")
        for name in ("U", "t", "t_prime", "u_prime"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise DomainError(f"{name} must be finite, got {v!r}")
        if self.t <= 0:
            raise DomainError(f"t must be positive, got {self.t}")
        if self.boundary not in ("periodic", "open"):
            raise DomainError(f"boundary must be 'periodic' or 'open', got {self.boundary!r}")

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(**d)

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def digest(self) -> str:
        """Stable hash used to key spectrum caches."""
        payload = json.dumps({k: (float(v) if isinstance(v, float) else v)
                              for k, v in self.to_dict().items()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def bonds(self, distance: int) -> list[tuple[int, int]]:
        """Site pairs ``(i, i+distance)``; wrapped modulo ``L`` when periodic.

        Small periodic rings keep the literal sum, so a bond may repeat or
        degenerate to ``i == j``.
        """
        L = self.L
        if self.periodic:
            return [(i, (i + distance) % L) for i in range(L)]
        return [(i, i + distance) for i in range(L - distance)]


@dataclass(frozen=True)
class SparseOperator:
    """A sparse matrix between two particle sectors (labels ``(n_up, n_dn)``)."""

    matrix: sparse.csr_matrix
    sector_in: tuple[int, int]
    sector_out: tuple[int, int]

    @property
    def shape(self):
        return self.matrix.shape

    def triplets(self):
        coo = self.matrix.tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, other):
        return self.matrix @ other

    @property
    def H(self) -> "SparseOperator":
        return SparseOperator(self.matrix.conj().T.tocsr(), self.sector_out, self.sector_in)


def _check_sector(params: ModelParams, basis: SectorBasis):
    if basis.L != params.L:
        raise DomainError(f"sector has L={basis.L} but model has L={params.L}")


def _hopping_triplets(basis: SectorBasis, pairs, amplitude: float):
    """Triplets of ``amplitude * sum_{(i,j), s} (c^dag_{i s} c_{j s} + h.c.)``."""
    L = basis.L
    rows, cols, vals = [], [], []
    diag = np.zeros(basis.dim)
    for i, j in pairs:
        for s in (0, 1):
            a, b = i + L * s, j + L * s
            if a == b:
                # c^dag_i c_i + h.c. on a wrapped ring
                diag += 2 * amplitude * occupations(basis, a)
                continue
            for x, y in ((a, b), (b, a)):
                src, dst, sign = hop_action(basis, x, y)
                rows.append(dst)
                cols.append(src)
                vals.append(amplitude * sign)
    return rows, cols, vals, diag


def double_occupancy_count(basis: SectorBasis) -> np.ndarray:
    """Number of doubly occupied sites for every basis state."""
    return popcount(basis.ups & basis.dns)


def site_density(basis: SectorBasis, site: int) -> np.ndarray:
    L = basis.L
    return occupations(basis, site) + occupations(basis, site + L)


def hamiltonian_parts(params: ModelParams, basis: SectorBasis):
    """Split ``H = K + U * D``.

    ``K`` holds every term except the on-site repulsion (as csr) and ``D`` is
    the per-state double-occupancy count, so time-dependent ``U`` schedules
    can rebuild ``H`` cheaply.
    """
    _check_sector(params, basis)
    pairs_nn = params.bonds(1)
    rows, cols, vals, diag = _hopping_triplets(basis, pairs_nn, -params.t)
    if params.t_prime != 0.0:
        r2, c2, v2, d2 = _hopping_triplets(basis, params.bonds(2), -params.t_prime)
        rows += r2
        cols += c2
        vals += v2
        diag = diag + d2
    if params.u_prime != 0.0:
        for i, j in pairs_nn:
            diag = diag + params.u_prime * site_density(basis, i) * site_density(basis, j)
    n = basis.dim
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    K = sparse.coo_matrix(
        (np.concatenate(vals).astype(float), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    K.sum_duplicates()
    K.eliminate_zeros()
    D = double_occupancy_count(basis).astype(float)
    return K, D


def build_hamiltonian(params: ModelParams, basis: SectorBasis) -> SparseOperator:
    K, D = hamiltonian_parts(params, basis)
    H = (K + sparse.diags(params.U * D)).tocsr()
    H.sum_duplicates()
    H.eliminate_zeros()
    return SparseOperator(H, basis.label, basis.label)


def _diag_op(values, basis: SectorBasis) -> SparseOperator:
    return SparseOperator(sparse.diags(np.asarray(values, dtype=float)).tocsr(),
                          basis.label, basis.label)


def build_observable(kind: str, basis: SectorBasis, site: int | None = None,
                     spin=None, k: int | None = None) -> SparseOperator:
    """Sector-diagonal Hermitian observables.

    ``kind`` is one of ``double_occupancy_avg``, ``local_density`` (site, spin),
    ``total_number``, ``momentum_occupation`` (k, spin) and ``density_N`` (site).
    ``k`` is the integer momentum label, crystal momentum ``2 pi k / L``.
    """
    L = basis.L

    def _site():
        if site is None or not 0 <= site < L:
            raise DomainError(f"site {site!r} outside [0, {L})")
        return site

    if kind == "double_occupancy_avg":
        return _diag_op(double_occupancy_count(basis) / L, basis)
    if kind == "local_density":
        return _diag_op(occupations(basis, _site() + L * spin_index(spin)), basis)
    if kind == "total_number":
        return _diag_op(np.full(basis.dim, basis.n_up + basis.n_dn), basis)
    if kind == "density_N":
        return _diag_op(site_density(basis, _site()), basis)
    if kind == "momentum_occupation":
        if k is None or not isinstance(k, (int, np.integer)):
            raise DomainError(f"momentum label must be an integer, got {k!r}")
        s = spin_index(spin)
        q = 2 * np.pi * k / L
        rows, cols, vals = [], [], []
        for j in range(L):
            occ = occupations(basis, j + L * s)
            rows.append(np.arange(basis.dim))
            cols.append(np.arange(basis.dim))
            vals.append(occ / L + 0j)
            for l in range(L):
                if l == j:
                    continue
                src, dst, sign = hop_action(basis, j + L * s, l + L * s)
                rows.append(dst)
                cols.append(src)
                vals.append(sign * np.exp(1j * q * (j - l)) / L)
        M = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(basis.dim, basis.dim)).tocsr()
        M.sum_duplicates()
        return SparseOperator(M, basis.label, basis.label)
    raise DomainError(f"unknown observable kind {kind!r}")


def target_sector(label: tuple[int, int], spin, kind: str) -> tuple[int, int]:
    nu, nd = label
    delta = 1 if kind == "create" else -1
    if spin_index(spin) == 0:
        return (nu + delta, nd)
    return (nu, nd + delta)


def ladder_operator(basis: SectorBasis, site: int, spin, kind: str) -> SparseOperator:
    """``c_{site,spin}`` or ``c^dag_{site,spin}`` from ``basis`` to the adjacent sector."""
    nu, nd = target_sector(basis.label, spin, kind)
    L = basis.L
    if not (0 <= nu <= L and 0 <= nd <= L):
        raise DomainError(f"ladder operator leaves the Fock space from sector {basis.label}")
    dst_basis = build_sector_basis(L, nu, nd)
    src, new_bits, sign = ladder_action(basis, OrbitalIndex(site, spin_index(spin)), kind)
    dst = dst_basis.lookup_bits(new_bits)
    M = sparse.csr_matrix((sign.astype(float), (dst, src)), shape=(dst_basis.dim, basis.dim))
    return SparseOperator(M, basis.label, (nu, nd))

"""Fermionic Fock-space bookkeeping for spinful chains.

Orbital ordering
----------------
Every orbital ``(site, spin)`` is mapped to the linear index
``site + L * spin`` with ``spin = 0`` for up and ``1`` for down, so all up
orbitals precede all down orbitals.  A basis state is the ordered product

    |s> = c^dag_{o_1} c^dag_{o_2} ... |0>,   o_1 < o_2 < ...

and therefore ``c_o`` / ``c^dag_o`` acting on ``|s>`` carries the sign
``(-1)**(number of occupied orbitals with linear index < o)``.  Encoding the
state as the integer ``up | (dn << L)`` makes bit ``o`` the occupation of
orbital ``o``.
"""
from __future__ import annotations

from functools import lru_cache
from math import comb
from typing import NamedTuple, Optional

import numpy as np

from .errors import DomainError

UP, DOWN = 0, 1
MAX_SITES = 16

_SPIN_NAMES = {"up": UP, "down": DOWN, "dn": DOWN, UP: UP, DOWN: DOWN}


def spin_index(spin) -> int:
    """Normalise ``'up'``/``'down'``/0/1 to 0 (up) or 1 (down)."""
    try:
        return _SPIN_NAMES[spin]
    except (KeyError, TypeError):
        raise DomainError(f"invalid spin {spin!r}") from None


class OrbitalIndex(NamedTuple):
    site: int
    spin: int

    def linear(self, L: int) -> int:
        return self.site + L * spin_index(self.spin)


class BasisState(NamedTuple):
    up: int
    dn: int

    def bits(self, L: int) -> int:
        return self.up | (self.dn << L)

    @classmethod
    def from_bits(cls, bits: int, L: int) -> "BasisState":
        mask = (1 << L) - 1
        return cls(bits & mask, (bits >> L) & mask)


def popcount(x):
    """Population count for python ints or integer arrays."""
    if isinstance(x, (int, np.integer)):
        return int(x).bit_count()
    return np.bitwise_count(np.asarray(x, dtype=np.uint64)).astype(np.int64)


def masks_with_popcount(L: int, n: int) -> np.ndarray:
    """All ``L``-bit masks with ``n`` set bits, ascending."""
    allm = np.arange(1 << L, dtype=np.int64)
    return allm[popcount(allm) == n]


class SectorBasis:
    """Occupation basis of the ``(n_up, n_dn)`` particle sector.

    States are ordered lexicographically by ``(up_mask, dn_mask)``; position
    ``p`` corresponds to ``up_masks[p // n_dn_states]`` and
    ``dn_masks[p % n_dn_states]``.  Instances are immutable.
    """

    def __init__(self, L: int, n_up: int, n_dn: int):
        if not (isinstance(L, (int, np.integer)) and 1 <= L <= MAX_SITES):
            raise DomainError(f"L must be an integer in [1, {MAX_SITES}], got {L!r}")
        if not (0 <= n_up <= L and 0 <= n_dn <= L):
            raise DomainError(f"particle counts ({n_up}, {n_dn}) invalid for L={L}")
        self.L, self.n_up, self.n_dn = int(L), int(n_up), int(n_dn)
        self.up_masks = masks_with_popcount(L, n_up)
        self.dn_masks = masks_with_popcount(L, n_dn)
        self._up_rank = np.full(1 << L, -1, dtype=np.int64)
        self._up_rank[self.up_masks] = np.arange(self.up_masks.size)
        self._dn_rank = np.full(1 << L, -1, dtype=np.int64)
        self._dn_rank[self.dn_masks] = np.arange(self.dn_masks.size)
        nd = self.dn_masks.size
        self.ups = np.repeat(self.up_masks, nd)
        self.dns = np.tile(self.dn_masks, self.up_masks.size)
        self.bits = self.ups | (self.dns << L)
        for arr in (self.up_masks, self.dn_masks, self._up_rank, self._dn_rank,
                    self.ups, self.dns, self.bits):
            arr.setflags(write=False)

    @property
    def label(self) -> tuple[int, int]:
        return (self.n_up, self.n_dn)

    @property
    def dim(self) -> int:
        return self.bits.size

    def __len__(self) -> int:
        return self.dim

    def __repr__(self) -> str:
        return f"SectorBasis(L={self.L}, n_up={self.n_up}, n_dn={self.n_dn}, dim={self.dim})"

    @property
    def states(self) -> list[BasisState]:
        return [BasisState(int(u), int(d)) for u, d in zip(self.ups, self.dns)]

    def __getitem__(self, p: int) -> BasisState:
        return BasisState(int(self.ups[p]), int(self.dns[p]))

    def index(self, state: BasisState) -> int:
        """Position of ``state``; raises ``KeyError`` if not in this sector."""
        p = int(self.lookup(np.array([state.up]), np.array([state.dn]))[0])
        if p < 0:
            raise KeyError(state)
        return p

    def lookup(self, ups, dns) -> np.ndarray:
        """Vectorised position lookup; -1 where a state is outside the sector."""
        ups = np.asarray(ups, dtype=np.int64)
        dns = np.asarray(dns, dtype=np.int64)
        iu = self._up_rank[ups]
        idn = self._dn_rank[dns]
        pos = iu * self.dn_masks.size + idn
        return np.where((iu >= 0) & (idn >= 0), pos, -1)

    def lookup_bits(self, bits) -> np.ndarray:
        bits = np.asarray(bits, dtype=np.int64)
        mask = (1 << self.L) - 1
        return self.lookup(bits & mask, (bits >> self.L) & mask)


@lru_cache(maxsize=256)
def build_sector_basis(L: int, n_up: int, n_dn: int) -> SectorBasis:
    """Cached constructor; bases are immutable so sharing is safe."""
    return SectorBasis(L, n_up, n_dn)


def sector_dim(L: int, n_up: int, n_dn: int) -> int:
    return comb(L, n_up) * comb(L, n_dn)


def apply_ladder(state: BasisState, orb: OrbitalIndex, kind: str, L: int
                 ) -> Optional[tuple[int, BasisState]]:
    """Apply ``c_orb`` (``kind='annihilate'``) or ``c^dag_orb`` (``'create'``).

    Returns ``None`` when the result vanishes by Pauli exclusion, otherwise
    ``(sign, new_state)``.
    """
    if not 0 <= orb.site < L:
        raise DomainError(f"site {orb.site} outside [0, {L})")
    o = orb.linear(L)
    bits = state.bits(L)
    occupied = (bits >> o) & 1
    if kind == "create":
        if occupied:
            return None
    elif kind == "annihilate":
        if not occupied:
            return None
    else:
        raise DomainError(f"unknown ladder kind {kind!r}")
    sign = -1 if popcount(bits & ((1 << o) - 1)) & 1 else 1
    return sign, BasisState.from_bits(bits ^ (1 << o), L)


def ladder_action(basis: SectorBasis, orb: OrbitalIndex, kind: str):
    """Vectorised ladder action on every state of ``basis``.

    Returns ``(src, new_bits, sign)`` restricted to states where the result
    does not vanish.
    """
    L = basis.L
    if not 0 <= orb.site < L:
        raise DomainError(f"site {orb.site} outside [0, {L})")
    o = orb.linear(L)
    occ = (basis.bits >> o) & 1
    if kind == "create":
        src = np.nonzero(occ == 0)[0]
    elif kind == "annihilate":
        src = np.nonzero(occ == 1)[0]
    else:
        raise DomainError(f"unknown ladder kind {kind!r}")
    b = basis.bits[src]
    sign = 1 - 2 * (popcount(b & ((1 << o) - 1)) & 1)
    return src, b ^ (1 << o), sign


def hop_action(basis: SectorBasis, a: int, b: int):
    """Action of ``c^dag_a c_b`` (linear orbital indices, ``a != b``).

    Returns ``(src, dst, sign)`` with positions inside ``basis``; the
    operator must conserve the sector (same spin species).
    """
    if a == b:
        raise DomainError("hop_action needs distinct orbitals; use occupations")
    bits = basis.bits
    sel = (((bits >> b) & 1) == 1) & (((bits >> a) & 1) == 0)
    src = np.nonzero(sel)[0]
    s = bits[src]
    lo, hi = min(a, b), max(a, b)
    between = ((1 << hi) - 1) ^ ((1 << (lo + 1)) - 1)
    sign = 1 - 2 * (popcount(s & between) & 1)
    dst = basis.lookup_bits(s ^ (1 << a) ^ (1 << b))
    if np.any(dst < 0):
        raise DomainError("hopping between spin species leaves the sector")
    return src, dst, sign


def occupations(basis: SectorBasis, orbital: int) -> np.ndarray:
    """0/1 occupation of a linear orbital for every basis state."""
    return ((basis.bits >> orbital) & 1).astype(np.int64)


def one_body_density(state_vector, basis: SectorBasis, spin) -> np.ndarray:
    """Matrix ``C[j, l] = <c^dag_{j,s} c_{l,s}>`` for one spin species."""
    L = basis.L
    sp = spin_index(spin)
    psi = np.asarray(state_vector)
    C = np.zeros((L, L), dtype=complex)
    for j in range(L):
        C[j, j] = np.vdot(psi, occupations(basis, j + L * sp) * psi)
        for l in range(L):
            if l == j:
                continue
            src, dst, sign = hop_action(basis, j + L * sp, l + L * sp)
            C[j, l] = np.sum(np.conj(psi[dst]) * sign * psi[src])
    return C


def momentum_occupation(state_vector, basis: SectorBasis, k: int, spin) -> float:
    """``<n_{k,s}>`` for the crystal momentum ``2 pi k / L``.

    ``n_k = (1/L) sum_{j,l} exp(i q (j - l)) c^dag_j c_l`` with ``q = 2 pi k / L``.
    """
    psi = np.asarray(state_vector)
    if psi.shape != (basis.dim,):
        raise DomainError(f"state has shape {psi.shape}, sector dim is {basis.dim}")
    norm = np.linalg.norm(psi)
    if abs(norm - 1.0) > 1e-8:
        raise DomainError(f"state is not normalised (|psi| = {norm:.3e})")
    L = basis.L
    C = one_body_density(psi, basis, spin)
    phase = np.exp(2j * np.pi * k / L * np.arange(L))
    val = np.real_if_close(phase @ C @ phase.conj() / L, tol=1e6)
    if abs(np.imag(val)) > 1e-10:
        raise DomainError(f"momentum occupation has imaginary part {np.imag(val):.2e}")
    return float(np.real(val))

"""Lattice translations on a periodic ring and the momentum-block embedding."""
from __future__ import annotations

import numpy as np
from scipy import sparse

from .errors import DomainError
from .fock import SectorBasis


def _rotate(masks: np.ndarray, L: int) -> np.ndarray:
    """Shift every occupied site ``i -> i+1 (mod L)``."""
    full = (1 << L) - 1
    return ((masks << 1) | (masks >> (L - 1))) & full


def translate(basis: SectorBasis, bits: np.ndarray):
    """Apply ``T`` (``T c^dag_i T^-1 = c^dag_{i+1}``) to basis states.

    Returns ``(new_bits, sign)``.  A particle wrapping from site ``L-1`` to
    site 0 is reordered past the other ``n-1`` operators of its species.
    """
    L = basis.L
    full = (1 << L) - 1
    up, dn = bits & full, (bits >> L) & full
    sign = np.ones(bits.shape, dtype=np.int64)
    top = 1 << (L - 1)
    if basis.n_up % 2 == 0:
        sign = np.where(up & top, -sign, sign)
    if basis.n_dn % 2 == 0:
        sign = np.where(dn & top, -sign, sign)
    return _rotate(up, L) | (_rotate(dn, L) << L), sign


def translation_matrix(basis: SectorBasis) -> sparse.csr_matrix:
    """Signed permutation matrix of ``T`` on one sector."""
    new, sign = translate(basis, basis.bits)
    dst = basis.lookup_bits(new)
    n = basis.dim
    return sparse.csr_matrix((sign.astype(float), (dst, np.arange(n))), shape=(n, n))


class TranslationOrbits:
    """Orbit decomposition of a sector under ``T``.

    For each representative ``r`` (smallest bit pattern of its orbit) we keep
    its period ``p`` and the states/signs of ``T^l r`` for ``l < p``.
    """

    def __init__(self, basis: SectorBasis):
        L = basis.L
        n = basis.dim
        orbit_bits = np.empty((L, n), dtype=np.int64)
        orbit_sign = np.empty((L, n), dtype=np.int64)
        b = basis.bits.copy()
        s = np.ones(n, dtype=np.int64)
        for l in range(L):
            orbit_bits[l], orbit_sign[l] = b, s
            b, step = translate(basis, b)
            s = s * step
        rep_bits = orbit_bits.min(axis=0)
        is_rep = rep_bits == basis.bits
        reps = np.nonzero(is_rep)[0]
        # period: first l > 0 with T^l r == r
        back = orbit_bits[1:, reps] == basis.bits[reps][None, :]
        period = np.where(back.any(axis=0), back.argmax(axis=0) + 1, L)
        chi = orbit_sign[period % L, reps]
        chi = np.where(period == L, s[reps], chi)  # T^L r = s * r
        self.basis = basis
        self.reps = reps
        self.period = period
        self.chi = chi
        self.orbit_pos = basis.lookup_bits(orbit_bits[:, reps])  # (L, nreps)
        self.orbit_sign = orbit_sign[:, reps]

    def allowed(self, m: int) -> np.ndarray:
        """Representatives compatible with momentum ``2 pi m / L``."""
        L = self.basis.L
        phase = np.exp(-2j * np.pi * m * self.period / L) * self.chi
        return np.abs(phase - 1) < 1e-9

    def embedding(self, m: int) -> sparse.csc_matrix:
        """Columns are the normalised momentum states ``|r, k>`` in the sector basis."""
        L = self.basis.L
        sel = np.nonzero(self.allowed(m))[0]
        rows, cols, vals = [], [], []
        for j, ri in enumerate(sel):
            p = self.period[ri]
            ls = np.arange(p)
            rows.append(self.orbit_pos[ls, ri])
            cols.append(np.full(p, j))
            vals.append(np.exp(-2j * np.pi * m * ls / L) * self.orbit_sign[ls, ri] / np.sqrt(p))
        if not sel.size:
            return sparse.csc_matrix((self.basis.dim, 0), dtype=complex)
        return sparse.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.basis.dim, sel.size),
        )

    def block_sizes(self) -> list[int]:
        return [int(self.allowed(m).sum()) for m in range(self.basis.L)]


def momentum_blocks(basis: SectorBasis, periodic: bool = True):
    """Embeddings ``B_m`` for every momentum label ``m = 0..L-1``."""
    if not periodic:
        raise DomainError("translation blocking needs periodic boundaries")
    orbits = TranslationOrbits(basis)
    return [orbits.embedding(m) for m in range(basis.L)]

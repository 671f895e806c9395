"""Independent dense reference constructions used by the test-suite.

The Fock space of ``2L`` orbitals is indexed by the occupation integer
``sum_o n_o 2**o``.  Operators are built from Kronecker products with the
most significant orbital as the leftmost factor, and a Jordan-Wigner string of
``Z`` on all lower orbitals.
"""
from functools import reduce

import numpy as np

A = np.array([[0.0, 1.0], [0.0, 0.0]])  # |1> -> |0>
Z = np.diag([1.0, -1.0])
I2 = np.eye(2)


def annihilator(o, n_orb):
    factors = [I2] * (n_orb - 1 - o) + [A] + [Z] * o
    return reduce(np.kron, factors, np.eye(1))


def all_annihilators(L):
    return [annihilator(o, 2 * L) for o in range(2 * L)]


def hubbard_dense(L, U, t=1.0, t_prime=0.0, u_prime=0.0, periodic=True):
    """Full Fock-space Hamiltonian written term by term from the ladder matrices."""
    c = all_annihilators(L)
    cd = [x.T for x in c]
    n = [cd[o] @ c[o] for o in range(2 * L)]
    dim = 4 ** L
    H = np.zeros((dim, dim))

    def bonds(d):
        if periodic:
            return [(i, (i + d) % L) for i in range(L)]
        return [(i, i + d) for i in range(L - d)]

    for amp, d in ((t, 1), (t_prime, 2)):
        if amp == 0:
            continue
        for i, j in bonds(d):
            for s in (0, 1):
                a, b = i + L * s, j + L * s
                H -= amp * (cd[a] @ c[b] + cd[b] @ c[a])
    for i in range(L):
        H += U * n[i] @ n[i + L]
    if u_prime:
        for i, j in bonds(1):
            H += u_prime * (n[i] + n[i + L]) @ (n[j] + n[j + L])
    return H


def restrict(M, rows_bits, cols_bits):
    return M[np.ix_(np.asarray(rows_bits), np.asarray(cols_bits))]


def atomic_states(U, mu, beta):
    """Single-site Hubbard: the four states (label, energy, N, weight)."""
    states = [("0", 0.0, 0), ("up", 0.0, 1), ("dn", 0.0, 1), ("ud", U, 2)]
    w = np.array([np.exp(-beta * (e - mu * n)) for _, e, n in states])
    return states, w / w.sum(), w.sum()

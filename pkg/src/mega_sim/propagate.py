"""Chebyshev propagation ``exp(-i H dt) v`` for ``H = K + u * diag(D)``.

The expansion is carried to machine precision inside every step, so a step
is exact up to rounding; the only discretisation error of a piecewise
constant schedule comes from freezing ``u`` per step.
"""
import numba
import numpy as np
from scipy import sparse


@numba.njit(cache=True)
def _bessel_series(x, nmax):
    """``J_0(x) .. J_{nmax-1}(x)`` by Miller's backward recurrence (x >= 0)."""
    out = np.zeros(nmax)
    if x == 0.0:
        out[0] = 1.0
        return out
    start = nmax + 20 + int(x)
    jp1 = 0.0
    j = 1e-300
    norm = 0.0
    for k in range(start, 0, -1):
        jm1 = 2.0 * k / x * j - jp1
        jp1 = j
        j = jm1
        if k - 1 < nmax:
            out[k - 1] = j
        if (k - 1) % 2 == 0:
            norm += j if k - 1 == 0 else 2.0 * j
        if abs(j) > 1e250:
            out *= 1e-250
            j *= 1e-250
            jp1 *= 1e-250
            norm *= 1e-250
    return out / norm


@numba.njit(cache=True)
def _cheb_recur(indptr, indices, data, diag, u, center, scale, x, prev, out):
    """``out = scale * (H - center) x - prev`` (fused Chebyshev recurrence)."""
    n = x.shape[0]
    for r in range(n):
        acc = (u * diag[r] - center) * x[r]
        for p in range(indptr[r], indptr[r + 1]):
            acc += data[p] * x[indices[p]]
        out[r] = scale * acc - prev[r]


@numba.njit(cache=True)
def _propagate(indptr, indices, data, diag, us, kbounds, dmax, dt, v):
    n = v.shape[0]
    psi = v.copy()
    t0 = np.empty(n, dtype=np.complex128)
    t1 = np.empty(n, dtype=np.complex128)
    t2 = np.empty(n, dtype=np.complex128)
    zero = np.zeros(n, dtype=np.complex128)
    for s in range(us.shape[0]):
        u = us[s]
        lo = kbounds[0] + min(0.0, u * dmax)
        hi = kbounds[1] + max(0.0, u * dmax)
        center = 0.5 * (hi + lo)
        half = 0.5 * (hi - lo) + 1e-12
        x = half * dt
        nterm = int(x + 12.0 * x ** (1.0 / 3.0) + 25.0)
        J = _bessel_series(x, nterm)
        t0[:] = psi
        _cheb_recur(indptr, indices, data, diag, u, center, 1.0 / half, t0, zero, t1)
        c1 = -2j * J[1]
        for r in range(n):
            psi[r] = J[0] * t0[r] + c1 * t1[r]
        phase = -1j
        for k in range(2, nterm):
            _cheb_recur(indptr, indices, data, diag, u, center, 2.0 / half, t1, t0, t2)
            phase *= -1j
            c = 2.0 * phase * J[k]
            for r in range(n):
                psi[r] += c * t2[r]
            t0, t1, t2 = t1, t2, t0
            if abs(J[k]) < 1e-18 and k > x:
                break
        # the exact step is unitary; remove rounding drift of the expansion
        nrm = 0.0
        for r in range(n):
            nrm += psi[r].real ** 2 + psi[r].imag ** 2
        rot = np.exp(-1j * center * dt) / np.sqrt(nrm)
        for r in range(n):
            psi[r] *= rot
    return psi


class SplitHamiltonian:
    """``H(u) = K + u * diag(D)`` in a form the compiled propagator accepts."""

    def __init__(self, K, D):
        K = sparse.csr_matrix(K)
        K.sort_indices()
        self.indptr = K.indptr.astype(np.int64)
        self.indices = K.indices.astype(np.int64)
        if np.iscomplexobj(K.data) and np.abs(K.data.imag).any():
            self.data = K.data.astype(np.complex128)
        else:
            self.data = K.data.real.astype(np.float64)
        self.diag = np.asarray(D, dtype=float)
        # Gershgorin bounds of K; the u*D shift is added per step
        absrow = np.asarray(abs(K).sum(axis=1)).ravel()
        kd = K.diagonal().real
        off = absrow - np.abs(kd)
        self.kbounds = np.array([(kd - off).min(), (kd + off).max()]) if kd.size else np.zeros(2)
        self.dmax = float(self.diag.max()) if self.diag.size else 0.0

    def evolve(self, v, us, dt):
        """Apply ``prod_s exp(-i dt H(us[s]))`` in order to ``v``."""
        us = np.ascontiguousarray(us, dtype=float)
        return _propagate(self.indptr, self.indices, self.data, self.diag, us,
                          self.kbounds, self.dmax, float(dt), np.asarray(v, dtype=np.complex128))


def expm_step(H, v, dt):
    """``exp(-i dt H) v`` for a single Hermitian (sparse) matrix."""
    n = H.shape[0]
    return SplitHamiltonian(H, np.zeros(n)).evolve(v, np.zeros(1), dt)

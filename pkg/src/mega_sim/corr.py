"""Lesser/greater correlators in Lehmann (pole) form and on time/frequency grids.

Conventions
-----------
Fourier transforms use ``F(w) = int dt exp(i w t) F(t)``.  A pole list stores
the weights ``W_p`` of ``F(t) = c * sum_p W_p exp(-i w_p t)`` where the
prefactor ``c`` is fixed by the correlator:

* greens lesser   ``i <c_j^dag c_i(t)>``      ``c = +i``
* greens greater  ``-i <c_i(t) c_j^dag>``     ``c = -i``
* density lesser  ``-i <n_j n_i(t)>``         ``c = -i``
* density greater ``-i <n_i(t) n_j>``         ``c = -i``

so ``F(w) = 2 pi c sum_p W_p delta(w - w_p)``.  Broadened spectra and
transformed series are stored in the same normalisation as the weights, i.e.
divided by ``2 pi c``; ``physical()`` restores the factor.  With this choice
the greens weights obey ``sum(W^<) + sum(W^>) = 1`` for ``i = j``, and both
detailed-balance ratios read ``W^< / W^> = exp(-beta (w - mu))`` (``mu = 0``
for the density pair).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import mpmath
import numpy as np
from scipy import special

from .eig import FullSpectrum
from .ensemble import DiagonalState, PureState, WeightedEnsemble
from .errors import DomainError, FitError
from .fock import build_sector_basis, spin_index
from .model import build_observable, ladder_operator, target_sector

MERGE_TOL = 1e-9
DEFAULT_ETA = 0.1
KINDS = ("lesser", "greater")
FAMILIES = ("greens", "density")
GRID_MARGIN = 8.0  # auto-ranged grids extend this many eta beyond the poles


def prefactor(kind: str, family: str) -> complex:
    if kind not in KINDS or family not in FAMILIES:
        raise DomainError(f"unknown correlator {family}/{kind}")
    if family == "greens" and kind == "lesser":
        return 1j
    return -1j


@dataclass
class PoleList:
    kind: str
    family: str
    i: int
    j: int
    spin: int
    omegas: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        prefactor(self.kind, self.family)
        self.omegas = np.asarray(self.omegas, dtype=float)
        self.weights = np.asarray(self.weights, dtype=complex)

    def __len__(self):
        return self.omegas.size

    @property
    def total(self) -> complex:
        return complex(self.weights.sum())

    def physical(self) -> np.ndarray:
        """Delta-function amplitudes of ``F(w)``: ``2 pi c W``."""
        return 2 * np.pi * prefactor(self.kind, self.family) * self.weights

    def time_values(self, times) -> np.ndarray:
        t = np.asarray(times, dtype=float)
        out = np.zeros(t.shape, dtype=complex)
        for s in range(0, self.omegas.size, 2048):
            ph = np.exp(-1j * np.multiply.outer(t, self.omegas[s:s + 2048]))
            out += ph @ self.weights[s:s + 2048]
        return prefactor(self.kind, self.family) * out

    def shifted(self, delta: float) -> "PoleList":
        return PoleList(self.kind, self.family, self.i, self.j, self.spin,
                        self.omegas + delta, self.weights.copy())

    def meta(self) -> dict:
        return {"kind": self.kind, "family": self.family, "i": self.i, "j": self.j,
                "spin": "up" if self.spin == 0 else "down"}

    def to_json(self) -> dict:
        return {**self.meta(), "omega": self.omegas.tolist(),
                "weight_re": self.weights.real.tolist(), "weight_im": self.weights.imag.tolist()}


@dataclass
class CorrelatorSeries:
    times: np.ndarray
    values: np.ndarray
    kind: str
    family: str = "greens"
    i: int = 0
    j: int = 0
    spin: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=complex)
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise DomainError("times and values must be 1-d arrays of equal length")
        if self.times.size > 1:
            d = np.diff(self.times)
            if np.any(d <= 0) or np.ptp(d) > 1e-9 * max(1.0, abs(d[0])) * self.times.size:
                raise DomainError("time grid must be strictly increasing and uniform")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass
class SpectralSeries:
    omegas: np.ndarray
    values: np.ndarray
    eta: Optional[float] = None
    kernel: Optional[str] = None
    kind: Optional[str] = None
    family: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.omegas = np.asarray(self.omegas, dtype=float)
        self.values = np.asarray(self.values, dtype=complex)
        if not np.all(np.isfinite(self.values)):
            raise DomainError("spectral values must be finite")

    def physical(self) -> np.ndarray:
        return 2 * np.pi * prefactor(self.kind, self.family) * self.values

    def integral(self) -> complex:
        return complex(np.trapezoid(self.values, self.omegas))


# --------------------------------------------------------------- pole algebra

def merge_poles(omegas, weights, tol: float = MERGE_TOL):
    """Combine poles whose frequencies chain together within ``tol``.

    The merged frequency is the cluster mean; weights are summed.
    """
    omegas = np.asarray(omegas, dtype=float)
    weights = np.asarray(weights, dtype=complex)
    if omegas.size == 0:
        return omegas, weights
    order = np.argsort(omegas, kind="stable")
    w_sorted = omegas[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(w_sorted) > tol)[0] + 1])
    counts = np.diff(np.concatenate([starts, [w_sorted.size]]))
    om = np.add.reduceat(w_sorted, starts) / counts
    wt = np.add.reduceat(weights[order], starts)
    return om, wt


def match_poles(lesser: PoleList, greater: PoleList, tol: float = MERGE_TOL):
    """Common frequencies with the lesser and greater weight found at each."""
    nl, ng = len(lesser), len(greater)
    om = np.concatenate([lesser.omegas, greater.omegas])
    if not om.size:
        return om, np.zeros(0, complex), np.zeros(0, complex)
    order = np.argsort(om, kind="stable")
    om = om[order]
    wl = np.concatenate([lesser.weights, np.zeros(ng)])[order]
    wg = np.concatenate([np.zeros(nl), greater.weights])[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(om) > tol)[0] + 1])
    counts = np.diff(np.concatenate([starts, [om.size]]))
    return (np.add.reduceat(om, starts) / counts,
            np.add.reduceat(wl, starts), np.add.reduceat(wg, starts))


# ----------------------------------------------------------- source handling

def _components(source, spectra: FullSpectrum, allow_nonstationary: bool):
    """Yield ``('diag', label, weights, blocks)`` or ``('pure', label, w, coeffs)``."""
    if isinstance(source, DiagonalState):
        for lab in source.labels():
            yield "diag", lab, source.weights[lab], source.blocks.get(lab, [])
        return
    if isinstance(source, PureState):
        if not allow_nonstationary:
            raise DomainError("pure state is not stationary; dephase it or pass allow_nonstationary=True")
        yield "pure", source.sector, 1.0, source.coefficients(spectra[source.sector])
        return
    if isinstance(source, WeightedEnsemble):
        if not source.stationary and not allow_nonstationary:
            raise DomainError("raw ensemble is not stationary; dephase or time-average it, "
                              "or pass allow_nonstationary=True")
        for w, st in source.entries:
            yield "pure", st.sector, w, st.coefficients(spectra[st.sector])
        return
    raise DomainError(f"unsupported correlator source {type(source).__name__}")


class _Elements:
    """Eigenbasis matrix elements ``<E'_m| op |E_n>``, cached per sector."""

    def __init__(self, spectra: FullSpectrum):
        self.spectra = spectra
        self.L = spectra.params.L
        self._cache = {}

    def ladder(self, label, site, spin, kind):
        key = ("ladder", label, site, spin, kind)
        if key not in self._cache:
            dst = target_sector(label, spin, kind)
            if not all(0 <= x <= self.L for x in dst):
                self._cache[key] = None
            else:
                if dst not in self.spectra:
                    raise DomainError(f"sector {dst} reached by the ladder operator is not in the spectrum")
                op = ladder_operator(build_sector_basis(self.L, *label), site, spin, kind)
                self._cache[key] = (dst, self._sandwich(op.matrix, label, dst))
        return self._cache[key]

    def density(self, label, site, spin):
        key = ("density", label, site, spin)
        if key not in self._cache:
            op = build_observable("local_density", build_sector_basis(self.L, *label), site=site, spin=spin)
            self._cache[key] = (label, self._sandwich(op.matrix, label, label))
        return self._cache[key]

    def _sandwich(self, op, src, dst):
        V = self.spectra[src].eigenvectors
        M = self.spectra[dst].project(op @ V)
        if np.isrealobj(V) and np.isrealobj(M):
            return M
        if np.abs(M.imag).max(initial=0) == 0:
            return M.real
        return M


def _operators(el: _Elements, label, kind, family, i, j, spin):
    """``(dst, Left, Right)`` with the Lehmann weight built from ``conj(Left) * Right``.

    lesser-type:  w = E_p - E_m,  W = sum_q rho_pq conj(Left[m,q]) Right[m,p]
    greater-type: w = E_m - E_p,  W = sum_q rho_qp conj(Left[m,p]) Right[m,q]
    """
    if family == "greens":
        if kind == "lesser":
            a = el.ladder(label, i, spin, "annihilate")
            b = el.ladder(label, j, spin, "annihilate")
            if a is None:
                return None
            return a[0], b[1], a[1]
        a = el.ladder(label, i, spin, "create")
        b = el.ladder(label, j, spin, "create")
        if a is None:
            return None
        return a[0], a[1], b[1]
    ni = el.density(label, i, spin)[1]
    nj = el.density(label, j, spin)[1]
    if kind == "lesser":
        return label, nj, ni
    return label, ni, nj


def _check_sites(spectra, i, j):
    L = spectra.params.L
    for s in (i, j):
        if not 0 <= s < L:
            raise DomainError(f"site {s} outside [0, {L})")


def correlator_poles(source, spectra: FullSpectrum, kind: str, i: int, j: int, spin,
                     family: str = "greens", allow_nonstationary: bool = False,
                     merge_tol: float = MERGE_TOL) -> PoleList:
    """Lehmann poles of a lesser or greater correlator for ``source``."""
    prefactor(kind, family)
    _check_sites(spectra, i, j)
    spin = spin_index(spin)
    el = _Elements(spectra)
    oms, wts = [], []
    for mode, lab, w, data in _components(source, spectra, allow_nonstationary):
        ops = _operators(el, lab, kind, family, i, j, spin)
        if ops is None:
            continue
        dst, Lm, Rm = ops
        Ep = spectra[lab].energies
        Em = spectra[dst].energies
        sgn = 1.0 if kind == "lesser" else -1.0
        if mode == "diag":
            live = np.nonzero(w > 0)[0]
            W = w[live][None, :] * (np.conj(Lm[:, live]) * Rm[:, live])
            om = sgn * (Ep[live][None, :] - Em[:, None])
            oms.append(om.ravel())
            wts.append(W.ravel())
            for lo, hi, R in data:
                off = R - np.diag(np.diag(R))
                if kind == "lesser":
                    # sum_q rho_pq conj(Left[m,q]) -> column p
                    Wb = Rm[:, lo:hi] * (np.conj(Lm[:, lo:hi]) @ off.T)
                else:
                    Wb = np.conj(Lm[:, lo:hi]) * (Rm[:, lo:hi] @ off)
                oms.append((sgn * (Ep[lo:hi][None, :] - Em[:, None])).ravel())
                wts.append(Wb.ravel())
        else:
            a = data
            live = np.nonzero(a != 0)[0]
            if kind == "lesser":
                W = (a[live][None, :] * Rm[:, live]) * np.conj(Lm[:, live] @ a[live])[:, None]
            else:
                W = np.conj(a[live][None, :] * Lm[:, live]) * (Rm[:, live] @ a[live])[:, None]
            oms.append((sgn * (Ep[live][None, :] - Em[:, None])).ravel())
            wts.append(w * W.ravel())
    if oms:
        om = np.concatenate(oms)
        wt = np.concatenate(wts)
        keep = wt != 0
        om, wt = merge_poles(om[keep], wt[keep], merge_tol)
    else:
        om, wt = np.zeros(0), np.zeros(0, complex)
    return PoleList(kind, family, i, j, spin, om, wt)


def correlator_time(source, spectra: FullSpectrum, kind: str, i: int, j: int, spin,
                    times, family: str = "greens", allow_nonstationary: bool = True) -> CorrelatorSeries:
    """Correlator on a time grid by eigenbasis phase evolution of ``op|source>``.

    Non-stationary sources are accepted here by default since the time-domain
    definition is meaningful for any state.
    """
    prefactor(kind, family)
    _check_sites(spectra, i, j)
    s = spin_index(spin)
    t = np.asarray(times, dtype=float)
    el = _Elements(spectra)
    out = np.zeros(t.shape, dtype=complex)
    for mode, lab, w, data in _components(source, spectra, allow_nonstationary):
        ops = _operators(el, lab, kind, family, i, j, s)
        if ops is None:
            continue
        dst, Lm, Rm = ops
        Ep = spectra[lab].energies
        Em = spectra[dst].energies
        sgn = 1.0 if kind == "lesser" else -1.0
        if mode == "diag":
            vecs = [(w, np.nonzero(w > 0)[0], None)]
            for lo, hi, R in data:
                # in-block coherences as pure components of the off-diagonal part
                off = R - np.diag(np.diag(R))
                ev, U = np.linalg.eigh(off)
                for lam, u in zip(ev, U.T):
                    if abs(lam) > 0:
                        a = np.zeros(Ep.size, dtype=complex)
                        a[lo:hi] = u
                        vecs.append((lam, np.arange(lo, hi), a))
            for weight, live, a in vecs:
                if a is None:
                    # incoherent populations: each eigenstate evolves by a phase
                    Z = np.conj(Lm[:, live]) * Rm[:, live]
                    ph_m = np.exp(sgn * 1j * np.multiply.outer(t, Em))
                    ph_p = np.exp(-sgn * 1j * np.multiply.outer(t, Ep[live])) * weight[live]
                    out += np.einsum("tm,mp,tp->t", ph_m, Z, ph_p, optimize=True)
                else:
                    out += weight * _pure_time(a, live, Lm, Rm, Ep, Em, t, kind)
        else:
            live = np.nonzero(data != 0)[0]
            out += w * _pure_time(data, live, Lm, Rm, Ep, Em, t, kind)
    return CorrelatorSeries(t, prefactor(kind, family) * out, kind, family, i, j, s)


def _pure_time(a, live, Lm, Rm, Ep, Em, t, kind):
    """``sum_m conj(x_m(t)) y_m(t)`` for the two branches of a pure component."""
    ph_p = np.exp(-1j * np.multiply.outer(Ep[live], t)) * a[live][:, None]  # (p, t)
    ph_m = np.exp(1j * np.multiply.outer(Em, t))  # (m, t)
    if kind == "lesser":
        # <psi| L^dag e^{iHt} R e^{-iHt} |psi>
        bra = np.conj(Lm[:, live] @ a[live])[:, None]
        return np.sum(bra * ph_m * (Rm[:, live] @ ph_p), axis=0)
    # <psi| e^{iHt} L^dag e^{-iHt} R |psi>
    ket = (Rm[:, live] @ a[live])[:, None]
    return np.sum(np.conj(Lm[:, live] @ ph_p) * np.conj(ph_m) * ket, axis=0)


def retarded_from_parts(greater: CorrelatorSeries, lesser: CorrelatorSeries) -> CorrelatorSeries:
    """``Theta(t) (G^> - G^<)`` with ``Theta(0) = 1``."""
    if greater.times.shape != lesser.times.shape or np.any(greater.times != lesser.times):
        raise DomainError("greater and lesser grids differ")
    if np.any(greater.times < 0):
        raise DomainError("retarded function is assembled on t >= 0 only")
    return CorrelatorSeries(greater.times, greater.values - lesser.values, "retarded",
                            greater.family, greater.i, greater.j, greater.spin)


# ---------------------------------------------------------------- broadening

def kernel(x, eta: float, kind: str = "gaussian"):
    if eta <= 0:
        raise DomainError("broadening width must be > 0")
    if kind == "gaussian":
        return np.exp(-0.5 * (x / eta) ** 2) / (eta * np.sqrt(2 * np.pi))
    if kind == "lorentzian":
        return eta / np.pi / (x ** 2 + eta ** 2)
    raise DomainError(f"unknown kernel {kind!r}")


def auto_grid(omegas, eta: float, step: float | None = None) -> np.ndarray:
    omegas = np.asarray(omegas, dtype=float)
    lo = (omegas.min() if omegas.size else 0.0) - GRID_MARGIN * eta
    hi = (omegas.max() if omegas.size else 0.0) + GRID_MARGIN * eta
    step = eta / 10 if step is None else step
    n = int(np.ceil((hi - lo) / step)) + 1
    return np.linspace(lo, hi, n)


def _broaden_arrays(om, wt, eta, kernel_kind, grid):
    vals = np.zeros(grid.shape, dtype=complex)
    if om.size == 0:
        return vals
    chunk = max(1, 2_000_000 // max(grid.size, 1))
    for s in range(0, om.size, chunk):
        K = kernel(np.subtract.outer(grid, om[s:s + chunk]), eta, kernel_kind)
        vals += K @ wt[s:s + chunk]
    return vals


def broaden(poles: PoleList, eta: float = DEFAULT_ETA, kernel_kind: str = "gaussian",
            grid=None) -> SpectralSeries:
    """Replace each delta by a unit-area kernel of width ``eta``."""
    if eta <= 0:
        raise DomainError("broadening width must be > 0")
    grid = auto_grid(poles.omegas, eta) if grid is None else np.asarray(grid, dtype=float)
    vals = _broaden_arrays(poles.omegas, poles.weights, eta, kernel_kind, grid)
    return SpectralSeries(grid, vals, eta, kernel_kind, poles.kind, poles.family, poles.meta())


def ldos(greater: PoleList, lesser: PoleList, eta: float = DEFAULT_ETA,
         kernel_kind: str = "gaussian", grid=None) -> SpectralSeries:
    """``A(w) = -(1/pi) Im G^R(w)`` from diagonal greens poles.

    ``G^R(t) = -i Theta(t) sum_p (W^>_p + W^<_p) exp(-i w_p t)``, so ``A`` is
    the broadened sum of both weight sets.  ``meta['lesser_only_discrepancy']``
    records ``max |A - (1/2pi) Im G^<|``, which vanishes only where the
    lesser weight saturates the spectral weight.
    """
    for p in (greater, lesser):
        if p.family != "greens" or p.i != p.j:
            raise DomainError("LDOS needs diagonal (i = j) greens poles")
    if (greater.kind, lesser.kind) != ("greater", "lesser") or greater.i != lesser.i \
            or greater.spin != lesser.spin:
        raise DomainError("LDOS needs matching greater and lesser poles")
    om = np.concatenate([greater.omegas, lesser.omegas])
    grid = auto_grid(om, eta) if grid is None else np.asarray(grid, dtype=float)
    wt = np.concatenate([greater.weights, lesser.weights]).real
    A = _broaden_arrays(om, wt, eta, kernel_kind, grid).real
    half = _broaden_arrays(lesser.omegas, lesser.weights.real, eta, kernel_kind, grid).real
    meta = {"site": greater.i, "spin": "up" if greater.spin == 0 else "down",
            "lesser_only_discrepancy": float(np.abs(A - half).max(initial=0.0))}
    return SpectralSeries(grid, A.astype(complex), eta, kernel_kind, "ldos", "greens", meta)


# -------------------------------------------------------- time-domain pipeline

def extend_negative_times(series: CorrelatorSeries) -> CorrelatorSeries:
    """Mirror an ``i = j`` series on ``t >= 0`` to ``[-T, T]``.

    Uses ``F(-t) = -conj(F(t))`` (imaginary part even, real part odd).
    """
    t, v = series.times, series.values
    if series.i != series.j:
        raise DomainError("negative-time mirroring only holds for i = j")
    if t.size == 0 or t[0] != 0.0:
        raise DomainError("series must start at t = 0")
    if abs(v[0].real) > 1e-8:
        raise DomainError(f"Re F(0) = {v[0].real:.3e} violates the mirror symmetry")
    v = v.copy()
    v[0] = 1j * v[0].imag
    tt = np.concatenate([-t[:0:-1], t])
    vv = np.concatenate([-np.conj(v[:0:-1]), v])
    meta = dict(series.meta, mirrored=True)
    return CorrelatorSeries(tt, vv, series.kind, series.family, series.i, series.j, series.spin, meta)


@dataclass
class TailFit:
    model: str
    amplitude: float
    rate: float  # 1/tau for exponential, p for power law
    omega0: float
    t_edge: float
    value: complex
    clamped: bool = False


def _fit_tail(t, v, fit_window: float, model: str, edge_sign: int,
              damped: bool = False) -> TailFit:
    """Fit the envelope over the outermost ``fit_window`` fraction of one side."""
    n = t.size
    k = max(3, int(round(fit_window * n)))
    if edge_sign > 0:
        tt, vv = t[-k:], v[-k:]
    else:
        tt, vv = -t[:k][::-1], v[:k][::-1]
    env = np.abs(vv)
    if np.any(env <= 0):
        if not np.any(env > 0):
            return TailFit(model, 0.0, np.inf, 0.0, tt[-1], 0j)
        env = np.maximum(env, env[env > 0].min())
    y = np.log(env)
    if model == "exponential":
        slope, icpt = np.polyfit(tt, y, 1)
        rate = -slope
    elif model == "power_law":
        if tt[0] <= 0:
            raise FitError("power-law tail needs a window at positive |t|")
        slope, icpt = np.polyfit(np.log(tt), y, 1)
        rate = -slope
    else:
        raise DomainError(f"unknown tail model {model!r}")
    clamped = False
    if not rate > 0:
        if not damped:
            raise FitError(f"{model} tail does not decay (rate {rate:.3e}); shorten the horizon")
        # a finite-size revival under Gaussian damping: continue at constant amplitude
        rate, clamped = 0.0, True
    # frequency of the last cycle from the unwrapped phase
    ph = np.unwrap(np.angle(vv))
    omega0 = -float(np.polyfit(tt, ph, 1)[0])
    return TailFit(model, float(np.exp(icpt)), float(rate), omega0, float(tt[-1]), complex(vv[-1]), clamped)


def _tail_integral(fit: TailFit, omega, damping_eta: Optional[float]):
    """``int_T^inf exp(i w t) F_T(t) D(t) dt`` for the continuation beyond the edge ``T``.

    ``F_T(t) = F(T) * envelope(t) / envelope(T) * exp(-i w0 (t - T))`` and
    ``D`` is the optional Gaussian damping.
    """
    omega = np.asarray(omega, dtype=float)
    T, G = fit.t_edge, fit.value
    if G == 0:
        return np.zeros(omega.shape, dtype=complex)
    if fit.model == "exponential":
        c = fit.rate + 1j * fit.omega0
        if not damping_eta:
            return np.exp(1j * omega * T) * G / (c - 1j * omega)
        a = damping_eta ** 2
        z = (a * T - (1j * omega - c)) / np.sqrt(2 * a)
        # erfc(z) = exp(-z^2) w(iz) keeps the Gaussian integral finite for large T
        return G * np.sqrt(np.pi / (2 * a)) * np.exp(1j * omega * T - 0.5 * a * T * T) * special.wofz(1j * z)
    p = fit.rate
    if damping_eta:
        # no closed form for a damped power law; integrate until the damping has killed it
        t_end = T + 12.0 / damping_eta
        tt = np.linspace(T, t_end, int(np.ceil((t_end - T) / 0.01)) + 1)
        f = (tt / T) ** (-p) * np.exp(-1j * fit.omega0 * (tt - T) - 0.5 * damping_eta ** 2 * tt ** 2)
        ph = np.exp(1j * np.multiply.outer(omega, tt))
        return G * np.trapezoid(ph * f, tt, axis=-1)
    out = np.empty(omega.shape, dtype=complex)
    for idx, w in np.ndenumerate(omega):
        kappa = w - fit.omega0
        if abs(kappa) < 1e-12:
            out[idx] = T / (p - 1) if p > 1 else np.inf
            continue
        # int_T^inf (t/T)^-p e^{i k (t-T)} dt = T^p e^{-i k T} (-i k)^(p-1) Gamma(1-p, -i k T)
        z = mpmath.mpc(0, -kappa)
        val = mpmath.power(T, p) * mpmath.exp(-1j * kappa * T) * mpmath.power(z, p - 1) \
            * mpmath.gammainc(1 - p, z * T)
        out[idx] = complex(val)
    return out * np.exp(1j * omega * T) * G


def fourier_tail_fit(series: CorrelatorSeries, omegas=None, tail_model: str = "exponential",
                     fit_window: float = 0.2, damping_eta: Optional[float] = None) -> SpectralSeries:
    """Transform a correlator to frequency with analytic tail continuation.

    The series (extended to negative times) is optionally multiplied by
    ``exp(-eta^2 t^2 / 2)``, which corresponds to Gaussian broadening of width
    ``eta`` in frequency.  The tails beyond both ends of the grid are
    continued with the fitted envelope and the last-cycle phase velocity, and
    integrated in closed form; the grid part uses the trapezoid rule.  The
    result is normalised like ``broaden`` (divided by ``2 pi c``).
    """
    if not 0 < fit_window < 1:
        raise DomainError("fit_window must lie in (0, 1)")
    t, v = series.times, series.values
    if t.size < 8 or not (t[0] < 0 < t[-1]):
        raise DomainError("series must cover negative and positive times")
    if omegas is None:
        wmax = np.pi / series.dt
        omegas = np.linspace(-min(wmax, 40.0), min(wmax, 40.0), 8001)
    omegas = np.asarray(omegas, dtype=float)
    if not np.any(v):
        return SpectralSeries(omegas, np.zeros(omegas.shape, complex), damping_eta,
                              "gaussian" if damping_eta else None, series.kind, series.family,
                              {"resolution": np.pi / t[-1]})
    damp = np.exp(-0.5 * (damping_eta * t) ** 2) if damping_eta else np.ones_like(t)
    right = _fit_tail(t, v, fit_window, tail_model, +1, bool(damping_eta))
    left = _fit_tail(t, v, fit_window, tail_model, -1, bool(damping_eta))
    vals = np.empty(omegas.shape, dtype=complex)
    chunk = max(1, 4_000_000 // t.size)
    w_trap = np.full(t.size, series.dt)
    w_trap[[0, -1]] *= 0.5
    dv = v * damp * w_trap
    for s in range(0, omegas.size, chunk):
        ph = np.exp(1j * np.multiply.outer(omegas[s:s + chunk], t))
        vals[s:s + chunk] = ph @ dv
    tail_r = _tail_integral(right, omegas, damping_eta)
    # left edge: substitute t -> -t, which maps exp(i w t) to exp(-i w t)
    tail_l = _tail_integral(left, -omegas, damping_eta)
    vals = vals + tail_r + tail_l
    scale = 2 * np.pi * prefactor(series.kind, series.family) if series.kind in KINDS else 2 * np.pi
    meta = {"resolution": damping_eta if damping_eta else np.pi / t[-1],
            "tail_model": tail_model, "tail_rate_right": right.rate, "tail_rate_left": left.rate,
            "tail_clamped": right.clamped or left.clamped}
    return SpectralSeries(omegas, vals / scale, damping_eta, "gaussian" if damping_eta else None,
                          series.kind, series.family, meta)


# ------------------------------------------------------------------ output

def _fmt(x: float) -> str:
    return "%.17g" % x


def series_csv(x, values, xname: str = "t") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([xname, "re", "im"])
    for a, z in zip(np.asarray(x), np.asarray(values, dtype=complex)):
        w.writerow([_fmt(a), _fmt(z.real), _fmt(z.imag)])
    return buf.getvalue()


def series_json(obj, source_hash: str = "") -> str:
    if isinstance(obj, CorrelatorSeries):
        head = {"kind": obj.kind, "family": obj.family, "i": obj.i, "j": obj.j,
                "spin": "up" if obj.spin == 0 else "down", "source_hash": source_hash}
        body = {"t": obj.times.tolist(), "re": obj.values.real.tolist(), "im": obj.values.imag.tolist()}
    elif isinstance(obj, SpectralSeries):
        head = {"kind": obj.kind, "family": obj.family, "source_hash": source_hash,
                "broadening": {"eta": obj.eta, "kernel": obj.kernel}, **obj.meta}
        body = {"omega": obj.omegas.tolist(), "re": obj.values.real.tolist(), "im": obj.values.imag.tolist()}
    else:
        raise DomainError(f"cannot serialise {type(obj).__name__}")
    return json.dumps({"meta": head, "data": body}, sort_keys=True)


def source_hash(source) -> str:
    from .ensemble import to_json

    return hashlib.sha256(json.dumps(to_json(source), sort_keys=True).encode()).hexdigest()[:16]

"""Pure states, thermal states and stationary mixtures built on a spectrum.

Two state families live here:

* ``PureState`` / ``WeightedEnsemble``: explicit amplitude vectors in a sector
  basis (Néel states, ramp outputs, time-averaged copies).
* ``DiagonalState``: a density matrix that commutes with ``H``, stored as
  per-sector weights over eigenstates in energy order plus the full matrix on
  degenerate eigenvalue blocks where the state keeps coherences.  Gibbs
  states, microcanonical windows and dephased states all use this layout.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .eig import FullSpectrum, SectorSpectrum, all_sectors, sectors_with_n
from .errors import DomainError, NumericError
from .fock import BasisState, build_sector_basis
from .model import ModelParams, hamiltonian_parts
from .propagate import SplitHamiltonian

log = logging.getLogger(__name__)

NORM_TOL = 1e-10
DEGENERACY_TOL = 1e-10
PROVENANCES = ("raw", "dephased", "time_averaged")


@dataclass(frozen=True)
class PureState:
    sector: tuple[int, int]
    amplitudes: np.ndarray
    L: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "sector", tuple(int(x) for x in self.sector))
        nrm = np.linalg.norm(amps)
        if abs(nrm - 1.0) > NORM_TOL:
            raise DomainError(f"pure state norm {nrm!r} differs from 1")

    def coefficients(self, spectrum: SectorSpectrum) -> np.ndarray:
        """Eigenbasis amplitudes ``<E_n|psi>``."""
        if tuple(spectrum.label) != self.sector:
            raise DomainError(f"state sector {self.sector} vs spectrum sector {spectrum.label}")
        return spectrum.project(self.amplitudes)

    def energy(self, spectra: FullSpectrum) -> float:
        spec = spectra[self.sector]
        a = self.coefficients(spec)
        return float(np.sum(np.abs(a) ** 2 * spec.energies))


@dataclass
class WeightedEnsemble:
    entries: list
    provenance: str = "raw"
    residual: Optional[float] = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise DomainError(f"unknown provenance {self.provenance!r}")
        if not self.entries:
            raise DomainError("empty ensemble")
        w = np.array([float(e[0]) for e in self.entries])
        if np.any(w < 0):
            raise DomainError("negative ensemble weight")
        if abs(w.sum() - 1.0) > NORM_TOL:
            raise DomainError(f"ensemble weights sum to {w.sum()!r}")

    @property
    def stationary(self) -> bool:
        return self.provenance != "raw"

    @property
    def weights(self) -> np.ndarray:
        return np.array([e[0] for e in self.entries])

    @property
    def states(self) -> list[PureState]:
        return [e[1] for e in self.entries]

    def energy(self, spectra: FullSpectrum) -> float:
        return float(sum(w * s.energy(spectra) for w, s in self.entries))


@dataclass(frozen=True)
class ThermalParams:
    beta: float = 0.0
    mu: float = 0.0
    kind: str = "canonical"
    n: Optional[int] = None
    emin: Optional[float] = None
    emax: Optional[float] = None
    sectors: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("canonical", "grand_canonical", "microcanonical"):
            raise DomainError(f"unknown ensemble kind {self.kind!r}")
        if not np.isfinite(self.beta) or self.beta < 0:
            raise DomainError("beta must be finite and >= 0")
        if self.kind == "canonical" and self.n is None and self.sectors is None:
            raise DomainError("canonical ensemble needs a particle number n")
        if self.kind == "microcanonical":
            if self.emin is None or self.emax is None or not self.emin < self.emax:
                raise DomainError("microcanonical window needs emin < emax")

    def to_dict(self) -> dict:
        d = {"beta": self.beta, "mu": self.mu, "kind": self.kind}
        for k in ("n", "emin", "emax"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.sectors is not None:
            d["sectors"] = [list(s) for s in self.sectors]
        return d


@dataclass
class DiagonalState:
    """Stationary density matrix in the energy eigenbasis.

    ``weights[label][n]`` is the population of eigenstate ``n``.  For
    degenerate blocks carrying coherences, ``blocks[label]`` holds
    ``(lo, hi, R)`` with ``R`` the full ``(hi-lo)`` square block (its diagonal
    repeats the weights).
    """

    weights: dict
    blocks: dict = field(default_factory=dict)
    provenance: str = "gibbs"
    params: Optional[ThermalParams] = None
    log_z: Optional[float] = None

    def __post_init__(self):
        self.weights = {tuple(k): np.asarray(v, dtype=float) for k, v in self.weights.items()}
        self.blocks = {tuple(k): list(v) for k, v in self.blocks.items() if v}
        tot = self.total()
        if abs(tot - 1.0) > NORM_TOL:
            raise DomainError(f"state weights sum to {tot!r}")

    stationary = True

    def total(self) -> float:
        return float(sum(w.sum() for w in self.weights.values()))

    def labels(self) -> list[tuple[int, int]]:
        return sorted(k for k, w in self.weights.items() if np.any(w > 0))

    def energy(self, spectra: FullSpectrum) -> float:
        return float(sum(np.dot(w, spectra[k].energies) for k, w in self.weights.items()))

    def matrix(self, label) -> np.ndarray:
        """Full eigenbasis density matrix of one sector."""
        label = tuple(label)
        w = self.weights.get(label)
        if w is None:
            raise DomainError(f"no weight in sector {label}")
        rho = np.diag(w).astype(complex)
        for lo, hi, R in self.blocks.get(label, ()):
            rho[lo:hi, lo:hi] = R
        return rho


GibbsState = DiagonalState


def combine(states: Sequence[DiagonalState], weights=None, provenance: str = "dephased") -> DiagonalState:
    """Convex mixture of diagonal states sharing one spectrum."""
    if weights is None:
        weights = np.full(len(states), 1.0 / len(states))
    out_w: dict = {}
    out_b: dict = {}
    for p, st in zip(weights, states):
        for k, w in st.weights.items():
            out_w[k] = out_w.get(k, 0.0) + p * w
        for k, blocks in st.blocks.items():
            acc = out_b.setdefault(k, {})
            for lo, hi, R in blocks:
                acc[(lo, hi)] = acc.get((lo, hi), 0.0) + p * R
    blocks = {k: [(lo, hi, R) for (lo, hi), R in sorted(v.items())] for k, v in out_b.items()}
    return DiagonalState(out_w, blocks, provenance=provenance)


# ---------------------------------------------------------------- pure states

def neel_state(L: int, parity: str = "up_first") -> PureState:
    """Alternating single occupation; ``up_first`` puts an up spin on site 0."""
    if L % 2 or L < 2:
        raise DomainError(f"Néel state needs an even L >= 2, got {L}")
    even = sum(1 << i for i in range(0, L, 2))
    odd = sum(1 << i for i in range(1, L, 2))
    if parity == "up_first":
        up, dn = even, odd
    elif parity == "down_first":
        up, dn = odd, even
    else:
        raise DomainError(f"unknown Néel parity {parity!r}")
    basis = build_sector_basis(L, L // 2, L // 2)
    amps = np.zeros(basis.dim, dtype=complex)
    amps[basis.index(BasisState(up, dn))] = 1.0
    return PureState(basis.label, amps, L)


def eigenstate(spectra: FullSpectrum, label, index: int) -> PureState:
    spec = spectra[label]
    if not 0 <= index < spec.dim:
        raise DomainError(f"eigenstate index {index} outside sector {label} of size {spec.dim}")
    vec = spec.expand([index])[:, 0]
    return PureState(tuple(label), vec / np.linalg.norm(vec), spectra.params.L)


@dataclass(frozen=True)
class ExpSchedule:
    """``U(t) = a * exp(-t / b) + c``."""

    a: float = 490.0
    b: float = 5.0
    c: float = 10.0

    def __call__(self, t):
        return self.a * np.exp(-np.asarray(t, dtype=float) / self.b) + self.c


@dataclass(frozen=True)
class ConstantSchedule:
    value: float

    def __call__(self, t):
        return np.full(np.shape(t), float(self.value))


def ramp_prepare(initial: PureState, params: ModelParams, schedule: Callable = None,
                 tau: float = 50.0, tol: float = 1e-8, n_start: int = 64,
                 max_halvings: int = 20) -> PureState:
    """Evolve ``initial`` under ``H(t)`` with ``U = schedule(t)`` for a time ``tau``.

    Each step applies the exact exponential of the Hamiltonian frozen at the
    step midpoint.  The step is halved until two successive final states
    differ by less than ``tol`` in vector norm.  Couplings other than ``U``
    come from ``params``.
    """
    if tau < 0:
        raise DomainError("tau must be >= 0")
    if tau == 0:
        return initial
    schedule = ExpSchedule() if schedule is None else schedule
    basis = build_sector_basis(initial.L, *initial.sector)
    K, D = hamiltonian_parts(params.with_(L=initial.L), basis)
    prop = SplitHamiltonian(K, D)

    def run(n):
        dt = tau / n
        us = schedule((np.arange(n) + 0.5) * dt)
        if np.any(~np.isfinite(us)):
            raise DomainError("schedule produced non-finite values")
        return prop.evolve(initial.amplitudes, us, dt)

    n = int(n_start)
    prev = run(n)
    dist = np.inf
    for _ in range(max_halvings):
        n *= 2
        cur = run(n)
        dist = float(np.linalg.norm(cur - prev))
        log.debug("ramp n=%d distance=%.3e", n, dist)
        if dist < tol:
            meta = {"steps": n, "last_distance": dist, "tau": tau}
            return PureState(initial.sector, cur, initial.L, meta)
        prev = cur
    raise NumericError(
        f"ramp did not converge after {max_halvings} halvings (distance {dist:.3e})",
        last_distance=dist)


def spin_band_top(energies, U: float) -> float:
    """Upper edge of the lowest band: the state below the widest gap under ``U``."""
    E = np.sort(np.asarray(energies))
    low = E[E < E[0] + U]
    if low.size < 2:
        return float(E[0])
    return float(low[np.argmax(np.diff(low))])


def mega_ensemble(states: Sequence[PureState], weighting: str = "uniform",
                  beta_hat: float | None = None, spectra: FullSpectrum | None = None) -> WeightedEnsemble:
    """Raw ensemble of prepared states, uniform or weighted by ``exp(-beta_hat <H>)``."""
    if not states:
        raise DomainError("no states supplied")
    if weighting == "uniform":
        w = np.full(len(states), 1.0 / len(states))
    elif weighting == "boltzmann":
        if beta_hat is None or spectra is None:
            raise DomainError("Boltzmann weighting needs beta_hat and spectra")
        e = np.array([s.energy(spectra) for s in states])
        x = -beta_hat * (e - e.min())
        w = np.exp(x)
        w /= w.sum()
    else:
        raise DomainError(f"unknown weighting {weighting!r}")
    return WeightedEnsemble(list(zip(w.tolist(), states)), provenance="raw")


# -------------------------------------------------------------- thermal states

def _required_sectors(spectra: FullSpectrum, tp: ThermalParams) -> list[tuple[int, int]]:
    L = spectra.params.L
    if tp.sectors is not None:
        want = [tuple(s) for s in tp.sectors]
    elif tp.kind == "canonical":
        want = sectors_with_n(L, tp.n)
    else:
        want = all_sectors(L)
    missing = [s for s in want if s not in spectra]
    if missing:
        raise DomainError(f"{tp.kind} state needs sectors {missing} which are not in the spectrum")
    if not want:
        raise DomainError("no sectors selected")
    return want


def gibbs(spectra: FullSpectrum, tp: ThermalParams) -> DiagonalState:
    """Canonical or grand-canonical Gibbs weights (microcanonical kinds are forwarded)."""
    if tp.kind == "microcanonical":
        return microcanonical_window(spectra, tp.emin, tp.emax, tp.sectors)
    labels = _required_sectors(spectra, tp)
    shifted = {}
    for lab in labels:
        e = spectra[lab].energies
        if tp.kind == "grand_canonical":
            e = e - tp.mu * (lab[0] + lab[1])
        shifted[lab] = e
    e0 = min(e.min() for e in shifted.values() if e.size)
    if tp.beta == 0:
        raw = {k: np.ones_like(e) for k, e in shifted.items()}
    else:
        raw = {k: np.exp(-tp.beta * (e - e0)) for k, e in shifted.items()}
    z = sum(w.sum() for w in raw.values())
    log_z = float(np.log(z) - tp.beta * e0)
    weights = {k: w / z for k, w in raw.items()}
    return DiagonalState(weights, provenance="gibbs", params=tp, log_z=log_z)


def microcanonical_window(spectra: FullSpectrum, emin: float, emax: float,
                          sectors=None) -> DiagonalState:
    """Uniform weight on every eigenstate with ``emin <= E_n <= emax``."""
    if not emin < emax:
        raise DomainError("window needs emin < emax")
    labels = spectra.labels() if sectors is None else [tuple(s) for s in sectors]
    for lab in labels:
        if lab not in spectra:
            raise DomainError(f"sector {lab} is not in the spectrum")
    masks = {lab: (spectra[lab].energies >= emin) & (spectra[lab].energies <= emax) for lab in labels}
    count = sum(int(m.sum()) for m in masks.values())
    if count == 0:
        allE = np.concatenate([spectra[l].energies for l in labels])
        below = allE[allE < emin]
        above = allE[allE > emax]
        near = (below.max() if below.size else None, above.min() if above.size else None)
        raise DomainError(
            f"energy window [{emin}, {emax}] contains no eigenstates; nearest eigenvalues {near}")
    weights = {lab: m / count for lab, m in masks.items()}
    tp = ThermalParams(kind="microcanonical", emin=emin, emax=emax,
                       sectors=tuple(labels) if sectors is not None else None)
    return DiagonalState(weights, provenance="microcanonical", params=tp)


# ------------------------------------------------------------ stationarization

def dephase(psi: PureState, spectrum: SectorSpectrum, tol: float = DEGENERACY_TOL) -> DiagonalState:
    """Drop every energy coherence, keeping the full matrix on degenerate blocks."""
    a = psi.coefficients(spectrum)
    w = np.abs(a) ** 2
    blocks = []
    for idx in spectrum.degenerate_blocks(tol):
        if idx.size > 1:
            ab = a[idx]
            R = np.outer(ab, ab.conj())
            if np.abs(R - np.diag(np.diag(R))).max() > 0:
                blocks.append((int(idx[0]), int(idx[-1]) + 1, R))
    return DiagonalState({psi.sector: w}, {psi.sector: blocks}, provenance="dephased")


def dephase_ensemble(ens: WeightedEnsemble, spectra: FullSpectrum) -> DiagonalState:
    parts = [dephase(s, spectra[s.sector]) for s in ens.states]
    return combine(parts, ens.weights)


def _same_block_mask(spectrum: SectorSpectrum, tol=DEGENERACY_TOL) -> np.ndarray:
    block_id = np.empty(spectrum.dim, dtype=np.int64)
    for b, idx in enumerate(spectrum.degenerate_blocks(tol)):
        block_id[idx] = b
    return block_id


def time_average(psi: PureState, spectrum: SectorSpectrum, T: float, n: int) -> WeightedEnsemble:
    """Uniform ensemble of ``exp(-i H k T/n) psi`` for ``k = 0..n-1``.

    ``residual`` is the largest surviving coherence
    ``|a_p a_q^*| |(1/n) sum_k exp(-i (E_p - E_q) k T / n)|`` over pairs in
    different degenerate blocks (coherences inside a block never decay and
    are stationary anyway).
    """
    if T <= 0 or n < 2:
        raise DomainError("time_average needs T > 0 and n >= 2")
    a = psi.coefficients(spectrum)
    E = spectrum.energies
    block_id = _same_block_mask(spectrum)
    mag = np.abs(a)
    live = np.nonzero(mag > 0)[0]
    residual = 0.0
    step = T / n
    chunk = max(1, 4_000_000 // max(live.size, 1))
    for s in range(0, live.size, chunk):
        rows = live[s:s + chunk]
        x = (E[rows, None] - E[None, live]) * step
        half = 0.5 * x
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.abs(np.sin(n * half) / (n * np.sin(half)))
        g = np.where(np.abs(np.sin(half)) < 1e-14, 1.0, g)
        r = mag[rows, None] * mag[None, live] * g
        r[block_id[rows, None] == block_id[None, live]] = 0.0
        residual = max(residual, float(r.max()))
    V = spectrum.expand(live)
    entries = []
    for k in range(n):
        vec = V @ (a[live] * np.exp(-1j * E[live] * k * step))
        entries.append((1.0 / n, PureState(psi.sector, vec / np.linalg.norm(vec), psi.L)))
    return WeightedEnsemble(entries, provenance="time_averaged", residual=residual)


# -------------------------------------------------------------- serialization

def _interleave(z) -> list:
    z = np.asarray(z, dtype=complex).ravel()
    out = np.empty(2 * z.size)
    out[0::2], out[1::2] = z.real, z.imag
    return out.tolist()


def _deinterleave(xs, shape=None) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    z = xs[0::2] + 1j * xs[1::2]
    return z if shape is None else z.reshape(shape)


def to_json(obj) -> dict:
    """JSON-ready dict for pure states, ensembles and diagonal states."""
    if isinstance(obj, PureState):
        return {"type": "pure", "L": obj.L, "sector": list(obj.sector),
                "amplitudes": _interleave(obj.amplitudes)}
    if isinstance(obj, WeightedEnsemble):
        return {"type": "ensemble", "provenance": obj.provenance, "residual": obj.residual,
                "entries": [{"weight": w, "state": to_json(s)} for w, s in obj.entries]}
    if isinstance(obj, DiagonalState):
        return {
            "type": "diagonal",
            "provenance": obj.provenance,
            "params": obj.params.to_dict() if obj.params else None,
            "log_z": obj.log_z,
            "sectors": [
                {"sector": list(k), "weights": w.tolist(),
                 "blocks": [{"lo": lo, "hi": hi, "matrix": _interleave(R)}
                            for lo, hi, R in obj.blocks.get(k, [])]}
                for k, w in sorted(obj.weights.items())
            ],
        }
    raise DomainError(f"cannot serialise {type(obj).__name__}")


def from_json(d: dict):
    kind = d.get("type")
    if kind == "pure":
        return PureState(tuple(d["sector"]), _deinterleave(d["amplitudes"]), d["L"])
    if kind == "ensemble":
        entries = [(e["weight"], from_json(e["state"])) for e in d["entries"]]
        return WeightedEnsemble(entries, d["provenance"], d.get("residual"))
    if kind == "diagonal":
        weights, blocks = {}, {}
        for s in d["sectors"]:
            k = tuple(s["sector"])
            weights[k] = np.array(s["weights"])
            blocks[k] = [(b["lo"], b["hi"], _deinterleave(b["matrix"], (b["hi"] - b["lo"],) * 2))
                         for b in s["blocks"]]
        p = d.get("params")
        tp = None
        if p:
            p = dict(p)
            if "sectors" in p:
                p["sectors"] = tuple(tuple(s) for s in p["sectors"])
            tp = ThermalParams(**p)
        return DiagonalState(weights, blocks, d["provenance"], tp, d.get("log_z"))
    raise DomainError(f"unknown serialised state type {kind!r}")

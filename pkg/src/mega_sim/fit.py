"""Effective-temperature extraction from lesser/greater ratios."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .corr import PoleList, SpectralSeries, correlator_poles, match_poles
from .eig import FullSpectrum, sectors_with_n
from .ensemble import DiagonalState, PureState, combine, dephase
from .errors import DomainError, FitError, MegaError, SignError

log = logging.getLogger(__name__)

BETA_CAP = 1e6
MU_UNDEFINED_BELOW = 1e-8


@dataclass(frozen=True)
class FitConfig:
    epsilon: float = 1e-6
    weighting: str = "min_magnitude"
    convergence_threshold: float = 1e-2

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise DomainError("epsilon must lie in (0, 1)")
        if self.weighting not in ("uniform", "min_magnitude"):
            raise DomainError(f"unknown weighting {self.weighting!r}")
        if not self.convergence_threshold > 0:
            raise DomainError("convergence threshold must be > 0")


@dataclass
class ThermalFit:
    """Fitted ``beta`` (and ``mu``) with the weighted RMS of the log-ratio fit.

    ``mu`` is ``None`` when ``|beta|`` is too small to define it.  ``beta``
    is reported as fitted; a negative value flags an inverted ensemble.
    """

    beta: float
    mu: Optional[float]
    residual: float
    mask: np.ndarray
    method: str
    intercept: float = 0.0

    @property
    def mu_defined(self) -> bool:
        return self.mu is not None

    def to_dict(self) -> dict:
        return {"beta": self.beta, "mu": self.mu, "residual": self.residual,
                "mask_size": int(self.mask.size), "method": self.method}


def _paired(lesser, greater):
    """Frequencies and physical lesser/greater amplitudes on a common support."""
    if isinstance(lesser, PoleList) and isinstance(greater, PoleList):
        if (lesser.kind, greater.kind) != ("lesser", "greater") or lesser.family != greater.family:
            raise DomainError("need a lesser and a greater pole list of the same family")
        om, wl, wg = match_poles(lesser, greater)
        pl = PoleList("lesser", lesser.family, lesser.i, lesser.j, lesser.spin, om, wl).physical()
        pg = PoleList("greater", greater.family, greater.i, greater.j, greater.spin, om, wg).physical()
        return om, pl, pg, lesser.family
    if isinstance(lesser, SpectralSeries) and isinstance(greater, SpectralSeries):
        if lesser.omegas.shape != greater.omegas.shape or np.any(lesser.omegas != greater.omegas):
            raise DomainError("lesser and greater spectra are on different grids")
        if lesser.family != greater.family:
            raise DomainError("lesser and greater spectra of different families")
        return lesser.omegas, lesser.physical(), greater.physical(), lesser.family
    raise DomainError("fit inputs must both be PoleLists or both SpectralSeries")


def _masked_log_ratio(lesser, greater, cfg: FitConfig, sign: float):
    om, pl, pg, family = _paired(lesser, greater)
    al, ag = np.abs(pl), np.abs(pg)
    if not al.size or al.max() == 0 or ag.max() == 0:
        raise FitError("no spectral weight to fit")
    mask = (al > cfg.epsilon * al.max()) & (ag > cfg.epsilon * ag.max())
    if not mask.any():
        raise FitError("fit mask is empty")
    r = sign * pl[mask] / pg[mask]
    if np.any(r.real <= 0):
        bad = om[mask][r.real <= 0]
        raise SignError(f"ratio has the wrong sign at {bad.size} masked frequencies (first {bad[0]:.6g})")
    w = np.minimum(al[mask], ag[mask]) if cfg.weighting == "min_magnitude" else np.ones(int(mask.sum()))
    return om[mask], np.log(r.real), w, family


def _wlstsq(X, y, w):
    sw = np.sqrt(w)
    coef, _, rank, _ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    if rank < X.shape[1]:
        raise FitError("fit is under-determined on the masked frequencies")
    res = y - X @ coef
    rms = float(np.sqrt(np.sum(w * res ** 2) / np.sum(w)))
    return coef, rms


def fit_beta_mu(lesser, greater, cfg: FitConfig = FitConfig()) -> ThermalFit:
    """Fit ``ln(-G^</G^>) = -beta (w - mu)`` on the masked frequencies."""
    om, y, w, family = _masked_log_ratio(lesser, greater, cfg, -1.0)
    if family != "greens":
        raise DomainError("fit_beta_mu expects single-particle Green's functions")
    (slope, icpt), rms = _wlstsq(np.column_stack([om, np.ones_like(om)]), y, w)
    beta = -float(slope)
    mu = float(icpt) / beta if abs(beta) >= MU_UNDEFINED_BELOW else None
    return ThermalFit(beta, mu, rms, om, "greens_grand", float(icpt))


def fit_beta_density(lesser, greater, cfg: FitConfig = FitConfig()) -> ThermalFit:
    """Fit ``ln(C^</C^>) = -beta w`` (no chemical potential)."""
    om, y, w, family = _masked_log_ratio(lesser, greater, cfg, 1.0)
    if family != "density":
        raise DomainError("fit_beta_density expects density correlators")
    (slope,), rms = _wlstsq(om[:, None], y, w)
    return ThermalFit(-float(slope), None, rms, om, "density_canonical")


# ------------------------------------------------------------ energy matching

class EnergyMatch(NamedTuple):
    beta: float
    saturated: bool
    energy_error: float


def canonical_energy(spectra: FullSpectrum, labels, beta: float) -> float:
    E = np.concatenate([spectra[l].energies for l in labels])
    if beta == 0:
        return float(E.mean())
    w = np.exp(-beta * (E - E.min()))
    return float(np.dot(w, E) / w.sum())


def energy_matched_beta(spectra: FullSpectrum, energy: float, n: int | None = None,
                        sectors=None, cap: float = BETA_CAP, tol: float = 1e-8,
                        max_iter: int = 200) -> EnergyMatch:
    """Canonical ``beta`` with ``Tr(rho_G(beta) H) = energy`` by bisection on ``[0, cap]``."""
    if sectors is None:
        if n is None:
            raise DomainError("give the particle number n or an explicit sector list")
        labels = sectors_with_n(spectra.params.L, n)
    else:
        labels = [tuple(s) for s in sectors]
    missing = [l for l in labels if l not in spectra]
    if missing:
        raise DomainError(f"canonical ensemble needs sectors {missing}")
    E = np.concatenate([spectra[l].energies for l in labels])
    e_ground, e_inf = float(E.min()), float(E.mean())
    scale = max(1.0, abs(e_inf))
    if energy > e_inf + 1e-12 * scale or energy < e_ground - tol:
        raise DomainError(f"energy {energy} outside ({e_ground}, {e_inf}]")
    if abs(energy - e_inf) <= 1e-12 * scale:
        return EnergyMatch(0.0, False, energy - e_inf)
    if energy - e_ground <= tol:
        return EnergyMatch(cap, True, canonical_energy(spectra, labels, cap) - energy)
    lo, hi = 0.0, cap
    mid = 0.5 * (lo + hi)
    diff = np.inf
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        diff = canonical_energy(spectra, labels, mid) - energy
        if abs(diff) < tol:
            break
        if diff > 0:
            lo = mid
        else:
            hi = mid
    return EnergyMatch(mid, mid >= cap * (1 - 1e-12), diff)


# ------------------------------------------------------------------ MEGA loop

@dataclass
class MegaResult:
    history: list
    ensemble: Optional[DiagonalState]
    converged: bool
    meta: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        return "converged" if self.converged else "not_converged"

    def to_json(self) -> str:
        return json.dumps({"status": self.status, "history": self.history, **self.meta},
                          sort_keys=True, indent=1)


def mega_run(states: Sequence[PureState], spectra: FullSpectrum, cfg: FitConfig = FitConfig(),
             family: str = "greens", site: int = 0, spin="up") -> MegaResult:
    """Grow a uniform ensemble one prepared state at a time until the ratio fit converges.

    Each iteration dephases the states accepted so far, recomputes the local
    lesser/greater poles and refits.  Fit failures are recorded in the history
    and the loop continues; running out of states is a valid non-converged
    outcome.
    """
    if not states:
        raise DomainError("mega_run needs at least one state")
    parts: list[DiagonalState] = []
    history = []
    current = None
    for k, psi in enumerate(states, start=1):
        parts.append(dephase(psi, spectra[psi.sector]))
        current = combine(parts)
        row = {"size": k, "energy": current.energy(spectra)}
        try:
            lo = correlator_poles(current, spectra, "lesser", site, site, spin, family=family)
            gr = correlator_poles(current, spectra, "greater", site, site, spin, family=family)
            fit = (fit_beta_mu if family == "greens" else fit_beta_density)(lo, gr, cfg)
            row.update(fit.to_dict(), status="ok")
        except MegaError as err:
            row.update(beta=None, mu=None, residual=None, mask_size=0, status="error", error=str(err))
            fit = None
        history.append(row)
        log.info("MEGA iteration %d: %s", k, row)
        if fit is not None and fit.residual < cfg.convergence_threshold:
            return MegaResult(history, current, True)
    return MegaResult(history, current, False)

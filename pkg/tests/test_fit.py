import json

import numpy as np
import pytest

from mega_sim.corr import PoleList, broaden, correlator_poles
from mega_sim.eig import full_spectrum, sectors_with_n
from mega_sim.ensemble import ThermalParams, eigenstate, gibbs, microcanonical_window
from mega_sim.errors import DomainError, FitError, SignError
from mega_sim.fit import (
    FitConfig,
    canonical_energy,
    energy_matched_beta,
    fit_beta_density,
    fit_beta_mu,
    mega_run,
)
from mega_sim.model import ModelParams


@pytest.fixture(scope="module")
def spec4():
    return full_spectrum(ModelParams(L=4, U=3.0))


def _pair(src, spec, family="greens", site=0):
    return (correlator_poles(src, spec, "lesser", site, site, "up", family=family),
            correlator_poles(src, spec, "greater", site, site, "up", family=family))


@pytest.mark.parametrize("beta", [0.5, 1.0, 2.0])
def test_grand_canonical_gibbs_is_exact(spec4, beta):
    g = gibbs(spec4, ThermalParams(beta=beta, mu=1.5, kind="grand_canonical"))
    fit = fit_beta_mu(*_pair(g, spec4))
    assert abs(fit.beta - beta) < 1e-6
    assert abs(fit.mu - 1.5) < 1e-6
    assert 0 <= fit.residual < 1e-8
    assert fit.method == "greens_grand" and fit.mask.size > 0


@pytest.mark.parametrize("beta", [0.5, 2.0])
def test_canonical_density_gibbs_is_exact(spec4, beta):
    g = gibbs(spec4, ThermalParams(beta=beta, kind="canonical", n=4))
    fit = fit_beta_density(*_pair(g, spec4, "density"))
    assert abs(fit.beta - beta) < 1e-6 and fit.residual < 1e-8
    assert fit.mu is None and fit.method == "density_canonical"


def test_infinite_temperature_leaves_mu_undefined(spec4):
    g = gibbs(spec4, ThermalParams(beta=0.0, kind="grand_canonical"))
    fit = fit_beta_mu(*_pair(g, spec4))
    assert abs(fit.beta) < 1e-10 and fit.mu is None and not fit.mu_defined


def test_mu_shift_invariance(spec4):
    g = gibbs(spec4, ThermalParams(beta=0.7, mu=0.4, kind="grand_canonical"))
    lo, gr = _pair(g, spec4)
    base = fit_beta_mu(lo, gr)
    moved = fit_beta_mu(lo.shifted(2.5), gr.shifted(2.5))
    assert moved.beta == pytest.approx(base.beta, abs=1e-8)
    assert moved.mu - base.mu == pytest.approx(2.5, abs=1e-8)


def test_mask_monotone_in_epsilon(spec4):
    g = gibbs(spec4, ThermalParams(beta=3.0, mu=1.5, kind="grand_canonical"))
    lo, gr = _pair(g, spec4)
    sizes = [fit_beta_mu(lo, gr, FitConfig(epsilon=e)).mask.size for e in (1e-12, 1e-6, 1e-3, 1e-1)]
    assert sizes == sorted(sizes, reverse=True)


def test_zero_frequency_pair_has_unit_ratio():
    lo = PoleList("lesser", "density", 0, 0, 0, np.array([0.0, 1.0]), np.array([0.3, 0.2]))
    gr = PoleList("greater", "density", 0, 0, 0, np.array([0.0, 1.0]), np.array([0.3, 0.2 * np.e]))
    fit = fit_beta_density(lo, gr, FitConfig(weighting="uniform"))
    assert fit.beta == pytest.approx(1.0, abs=1e-12) and fit.residual < 1e-14


def test_fit_errors():
    lo = PoleList("lesser", "greens", 0, 0, 0, np.array([0.0]), np.array([1.0]))
    gr = PoleList("greater", "greens", 0, 0, 0, np.array([5.0]), np.array([1.0]))
    with pytest.raises(FitError):
        fit_beta_mu(lo, gr)
    bad = PoleList("greater", "greens", 0, 0, 0, np.array([0.0, 1.0]), np.array([-1.0, 1.0]))
    lo2 = PoleList("lesser", "greens", 0, 0, 0, np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(SignError):
        fit_beta_mu(lo2, bad)
    with pytest.raises(DomainError):
        FitConfig(epsilon=0.0)
    with pytest.raises(DomainError):
        fit_beta_mu(gr, lo)


def test_broadened_fit_is_close(spec4):
    g = gibbs(spec4, ThermalParams(beta=1.0, mu=1.5, kind="grand_canonical"))
    lo, gr = _pair(g, spec4)
    grid = np.linspace(-6, 9, 3001)
    fit = fit_beta_mu(broaden(lo, 0.05, grid=grid), broaden(gr, 0.05, grid=grid), FitConfig(epsilon=1e-3))
    assert fit.beta == pytest.approx(1.0, rel=0.05)
    assert fit.mu == pytest.approx(1.5, abs=0.1)


def test_energy_matched_beta_examples(spec4):
    labels = sectors_with_n(4, 4)
    E = np.concatenate([spec4[l].energies for l in labels])
    r = energy_matched_beta(spec4, float(E.mean()), n=4)
    assert r.beta == 0.0 and not r.saturated
    r = energy_matched_beta(spec4, float(E.min()), n=4)
    assert r.saturated and r.beta == 1e6
    with pytest.raises(DomainError):
        energy_matched_beta(spec4, float(E.min()) - 1.0, n=4)
    with pytest.raises(DomainError):
        energy_matched_beta(spec4, float(E.mean()) + 0.1, n=4)


def test_energy_matched_beta_inverts_gibbs(spec4):
    for beta in (0.3, 1.7, 6.0):
        e = canonical_energy(spec4, sectors_with_n(4, 4), beta)
        r = energy_matched_beta(spec4, e, n=4)
        assert abs(r.energy_error) < 1e-8 and r.beta == pytest.approx(beta, rel=1e-5)


def test_mega_run_window_matches_microcanonical():
    spec = full_spectrum(ModelParams(L=4, U=3.0, t_prime=0.4, u_prime=0.7))
    E = spec[(2, 2)].energies
    lo, hi = E[10] - 1e-9, E[14] + 1e-9
    inside = np.nonzero((E >= lo) & (E <= hi))[0]
    states = [eigenstate(spec, (2, 2), int(k)) for k in inside]
    res = mega_run(states, spec, FitConfig(convergence_threshold=1e-300), family="density")
    ref = microcanonical_window(spec, lo, hi, [(2, 2)])
    want = fit_beta_density(*_pair(ref, spec, "density"))
    last = res.history[-1]
    assert not res.converged and len(res.history) == inside.size
    assert last["beta"] == pytest.approx(want.beta, abs=1e-10)
    assert last["residual"] == pytest.approx(want.residual, abs=1e-10)
    data = json.loads(res.to_json())
    assert data["status"] == "not_converged"
    assert set(data["history"][0]) >= {"size", "beta", "mu", "residual", "mask_size"}


def test_mega_run_converges_and_records_errors(spec4):
    g_states = [eigenstate(spec4, (2, 2), 0)]
    res = mega_run(g_states, spec4, FitConfig(convergence_threshold=1.0))
    assert len(res.history) == 1
    assert res.history[0]["status"] in ("ok", "error")
    if res.history[0]["status"] == "ok":
        assert res.converged == (res.history[0]["residual"] < 1.0)
    with pytest.raises(DomainError):
        mega_run([], spec4)

"""Acceptance suite: one marked group of tests per criterion.

Each test records its measured figures through the ``report`` fixture; the
terminal summary prints one verdict line per criterion followed by them.
"""
import itertools
import json
import os
import time

import numpy as np
import pytest

from mega_sim.cli import main
from mega_sim.corr import (
    broaden,
    correlator_poles,
    correlator_time,
    extend_negative_times,
    fourier_tail_fit,
    ldos,
)
from mega_sim.diag import (
    SubsystemSpec,
    eth_scatter,
    monotonicity_violations,
    reduced_density_matrix,
    state_trace_distance,
    trace_distance,
)
from mega_sim.eig import full_spectrum, neighbours, sectors_with_n
from mega_sim.ensemble import (
    ExpSchedule,
    PureState,
    ThermalParams,
    WeightedEnsemble,
    dephase,
    dephase_ensemble,
    eigenstate,
    gibbs,
    mega_ensemble,
    microcanonical_window,
    neel_state,
    ramp_prepare,
    spin_band_top,
)
from mega_sim.errors import DomainError
from mega_sim.fit import canonical_energy, energy_matched_beta, fit_beta_density, fit_beta_mu
from mega_sim.fock import build_sector_basis
from mega_sim.model import ModelParams, build_hamiltonian, build_observable, ladder_operator

from oracles import all_annihilators, hubbard_dense, restrict

CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def _canonical_plan(L, n):
    """Sectors of particle number ``n`` plus everything one ladder step away."""
    can = sectors_with_n(L, n)
    return sorted(set(can) | {s for lab in can for s in neighbours(lab, L)})


def _random_state(L, label, rng):
    b = build_sector_basis(L, *label)
    v = rng.normal(size=b.dim) + 1j * rng.normal(size=b.dim)
    return PureState(label, v / np.linalg.norm(v), L)


# ------------------------------------------------------------------ 1

@pytest.mark.criterion("1")
def test_c1_fermion_algebra_oracle(report):
    t0 = time.perf_counter()
    checked = 0
    for L in (1, 2, 3):
        c = all_annihilators(L)
        n = [x.T @ x for x in c]
        for kw in (dict(U=3.0), dict(U=10.0, t_prime=0.75, u_prime=1.5),
                   dict(U=2.5, t_prime=-0.5, u_prime=0.25, boundary="open")):
            p = ModelParams(L=L, **kw)
            H = hubbard_dense(L, p.U, p.t, p.t_prime, p.u_prime, p.periodic)
            for nu, nd in itertools.product(range(L + 1), repeat=2):
                b = build_sector_basis(L, nu, nd)
                assert np.array_equal(build_hamiltonian(p, b).toarray(), restrict(H, b.bits, b.bits))
                checked += 1
        for nu, nd in itertools.product(range(L + 1), repeat=2):
            b = build_sector_basis(L, nu, nd)
            r = lambda M: restrict(M, b.bits, b.bits)  # noqa: E731
            for site, s, kind in itertools.product(range(L), (0, 1), ("create", "annihilate")):
                try:
                    op = ladder_operator(b, site, s, kind)
                except DomainError:
                    continue
                dst = build_sector_basis(L, *op.sector_out)
                ref = c[site + L * s].T if kind == "create" else c[site + L * s]
                assert np.array_equal(op.toarray(), restrict(ref, dst.bits, b.bits))
                checked += 1
            docc = sum(n[i] @ n[i + L] for i in range(L)) / L
            assert np.array_equal(build_observable("double_occupancy_avg", b).toarray(), r(docc))
            assert np.array_equal(build_observable("total_number", b).toarray(), r(sum(n)))
            checked += 2
            for i in range(L):
                assert np.array_equal(build_observable("density_N", b, site=i).toarray(), r(n[i] + n[i + L]))
                checked += 1
                for s in (0, 1):
                    got = build_observable("local_density", b, site=i, spin=s).toarray()
                    assert np.array_equal(got, r(n[i + L * s]))
                    checked += 1
            for k, s in itertools.product(range(L), (0, 1)):
                q = 2 * np.pi * k / L
                nk = sum(np.exp(1j * q * (j - l)) * c[j + L * s].T @ c[l + L * s]
                         for j in range(L) for l in range(L)) / L
                assert np.array_equal(build_observable("momentum_occupation", b, k=k, spin=s).toarray(), r(nk))
                checked += 1
    dt = time.perf_counter() - t0
    report(f"{checked} matrices identical to the Kronecker construction, {dt:.2f} s")
    assert dt < 10


# ------------------------------------------------------------------ 2, 3

GRID = [(L, U) for L in (4, 6) for U in (3.0, 10.0)]
BETAS = (0.5, 1.0, 2.0)


@pytest.fixture(scope="module", params=GRID, ids=[f"L{L}-U{U:g}" for L, U in GRID])
def full_spec(request):
    L, U = request.param
    t0 = time.perf_counter()
    spec = full_spectrum(ModelParams(L=L, U=U))
    return spec, time.perf_counter() - t0


@pytest.mark.criterion("2")
def test_c2_grand_canonical_fdt_fit(full_spec, report):
    spec, t_diag = full_spec
    p = spec.params
    t0 = time.perf_counter()
    worst = [0.0, 0.0, 0.0]
    for beta in BETAS:
        g = gibbs(spec, ThermalParams(beta=beta, mu=p.U / 2, kind="grand_canonical"))
        lo = correlator_poles(g, spec, "lesser", 0, 0, "up")
        gr = correlator_poles(g, spec, "greater", 0, 0, "up")
        f = fit_beta_mu(lo, gr)
        errs = (abs(f.beta - beta), abs(f.mu - p.U / 2), f.residual)
        worst = [max(a, b) for a, b in zip(worst, errs)]
        assert errs[0] < 1e-6 and errs[1] < 1e-6 and errs[2] < 1e-8
    dt = time.perf_counter() - t0 + t_diag
    report(f"L={p.L} U={p.U:g}: max|dbeta|={worst[0]:.1e} max|dmu|={worst[1]:.1e} "
           f"max residual={worst[2]:.1e}, {dt:.1f} s")
    assert dt < 120


@pytest.mark.criterion("3")
def test_c3_canonical_density_fit(full_spec, report):
    spec, t_diag = full_spec
    p = spec.params
    t0 = time.perf_counter()
    worst = 0.0
    for beta in BETAS:
        g = gibbs(spec, ThermalParams(beta=beta, kind="canonical", n=p.L))
        lo = correlator_poles(g, spec, "lesser", 0, 0, "up", family="density")
        gr = correlator_poles(g, spec, "greater", 0, 0, "up", family="density")
        f = fit_beta_density(lo, gr)
        worst = max(worst, abs(f.beta - beta))
        assert abs(f.beta - beta) < 1e-6
    dt = time.perf_counter() - t0 + t_diag
    report(f"L={p.L} U={p.U:g}: max|dbeta|={worst:.1e}, {dt:.1f} s")
    assert dt < 120


# ------------------------------------------------------------------ 4

@pytest.fixture(scope="module")
def spec4():
    return full_spectrum(ModelParams(L=4, U=3.0))


@pytest.mark.criterion("4")
@pytest.mark.parametrize("make", ["pure", "dephased", "gibbs_grand", "gibbs_canonical", "microcanonical"])
def test_c4_sum_rule(spec4, make, report):
    rng = np.random.default_rng(4)
    E = spec4[(2, 2)].energies
    src = {
        "pure": lambda: _random_state(4, (2, 1), rng),
        "dephased": lambda: dephase(_random_state(4, (2, 2), rng), spec4[(2, 2)]),
        "gibbs_grand": lambda: gibbs(spec4, ThermalParams(beta=1.0, mu=1.5, kind="grand_canonical")),
        "gibbs_canonical": lambda: gibbs(spec4, ThermalParams(beta=0.7, kind="canonical", n=4)),
        "microcanonical": lambda: microcanonical_window(spec4, E[2], E[20], [(2, 2)]),
    }[make]()
    worst = 0.0
    for site, spin in itertools.product(range(4), ("up", "down")):
        gt = correlator_poles(src, spec4, "greater", site, site, spin, allow_nonstationary=True)
        ls = correlator_poles(src, spec4, "lesser", site, site, spin, allow_nonstationary=True)
        worst = max(worst, abs(ldos(gt, ls).integral().real - 1))
    report(f"{make}: max |integral - 1| = {worst:.1e}")
    assert worst < 1e-6


# ------------------------------------------------------------------ 5

@pytest.mark.criterion("5")
def test_c5_dual_path(spec4, report):
    eta = 0.1
    g = gibbs(spec4, ThermalParams(beta=1.0, kind="canonical", n=4))
    poles = correlator_poles(g, spec4, "lesser", 0, 0, "up")
    w = np.linspace(-8, 8, 1601)
    ref = broaden(poles, eta, grid=w)
    t = np.arange(0, 20 + 1e-9, 0.05)
    ser = extend_negative_times(correlator_time(g, spec4, "lesser", 0, 0, "up", t))
    got = fourier_tail_fit(ser, w, damping_eta=eta)
    rms = np.sqrt(np.mean(np.abs(got.values - ref.values) ** 2)) / np.abs(ref.values).max()
    report(f"peak-normalised RMS = {100 * rms:.3f}%")
    assert rms < 0.02


# ------------------------------------------------------------------ 6

PAIR_COUNTS = {4: 50, 5: 30, 6: 20}


@pytest.mark.criterion("6")
@pytest.mark.parametrize("L", sorted(PAIR_COUNTS))
def test_c6_contractivity(L, report):
    rng = np.random.default_rng(60 + L)
    p = ModelParams(L=L, U=rng.uniform(1, 8), t_prime=0.3)
    n = L
    spec = full_spectrum(p, sectors_with_n(L, n))
    labels = [lab for lab in sectors_with_n(L, n) if min(lab) > 0]
    worst = -np.inf
    for _ in range(PAIR_COUNTS[L]):
        picks = rng.choice(len(labels), size=2, replace=False)
        ens = WeightedEnsemble([(w, _random_state(L, labels[k], rng))
                                for w, k in zip((0.6, 0.4), picks)])
        x = dephase_ensemble(ens, spec)
        g = gibbs(spec, ThermalParams(beta=rng.uniform(0.05, 3.0), kind="canonical", n=n))
        chain = [state_trace_distance(x, g, spec)]
        start = int(rng.integers(0, 2))
        # the full system enters through the sector-wise distance above
        for size in range(L - 1, 0, -1):
            sub = SubsystemSpec(start, start + size)
            chain.append(trace_distance(reduced_density_matrix(x, spec, sub),
                                        reduced_density_matrix(g, spec, sub)))
        # distances along shrinking nested subsystems never grow
        worst = max(worst, float(np.max(np.diff(chain))))
        assert np.all(np.diff(chain) <= 1e-12)
    report(f"L={L}: {PAIR_COUNTS[L]} pairs, largest increase along the chain {worst:.1e}")


# ------------------------------------------------------------------ 7

def _run_cli(name, tmp_path):
    out = tmp_path / name
    code = main(["run", os.path.join(CONFIG_DIR, f"{name}.cfg"), "--output", str(out),
                 "--cache-dir", str(tmp_path / "cache")])
    assert code == 0
    return json.loads((out / "manifest.json").read_text())


@pytest.mark.criterion("7-fig4")
def test_c7_fig4_spin_band_double_occupancy(report):
    spec = full_spectrum(ModelParams(L=6, U=10.0), [(3, 3)])
    tab = eth_scatter(spec, ["double_occupancy_avg"])
    band = tab.energies <= spin_band_top(tab.energies, 10.0)
    v = monotonicity_violations(tab.energies[band], tab.values[band, 0])
    report(f"{int(band.sum())} spin-band states, {v} violations")
    assert v <= 2


def _ramp_deviation_window(L, times):
    p = ModelParams(L=L, U=10.0)
    spec = full_spectrum(p, _canonical_plan(L, L))
    sch = ExpSchedule(490.0, 5.0, 10.0)
    states = [ramp_prepare(neel_state(L, o), p, sch, tau=50.0, tol=1e-8) for o in ("up_first", "down_first")]
    ens = dephase_ensemble(mega_ensemble(states, "uniform", None, spec), spec)
    m = energy_matched_beta(spec, ens.energy(spec), n=L)
    ref = gibbs(spec, ThermalParams(beta=m.beta, kind="canonical", n=L))
    a = np.abs(correlator_time(ens, spec, "lesser", 0, 0, "up", times).values.imag)
    b = np.abs(correlator_time(ref, spec, "lesser", 0, 0, "up", times).values.imag)
    bad = np.nonzero(np.abs(a - b) >= 0.1 * b.max())[0]
    return (times[bad[0]] if bad.size else np.inf), m.beta


@pytest.mark.criterion("7-gf_less")
@pytest.mark.slow
def test_c7_gf_less_window_grows_with_size(report):
    t0 = time.perf_counter()
    times = np.arange(401) * 0.05
    w4, b4 = _ramp_deviation_window(4, times)
    w6, b6 = _ramp_deviation_window(6, times)
    dt = time.perf_counter() - t0
    report(f"deviation stays below 10% of peak until t={w4:g} (L=4, beta={b4:.3f}) "
           f"and t={w6:g} (L=6, beta={b6:.3f}), {dt:.0f} s")
    assert w6 > w4
    assert dt < 600


@pytest.mark.criterion("7-gf_ratio")
def test_c7_gf_ratio_wider_window_fits_better(tmp_path, report):
    wide = _run_cli("fig9", tmp_path)["results"]
    narrow = _run_cli("fig9_narrow", tmp_path)["results"]
    report(f"wide window: {wide['window_states']} states, residual {wide['fit']['residual']:.4f}; "
           f"narrow window: {narrow['window_states']} states, residual {narrow['fit']['residual']:.4f}")
    assert wide["fit"]["residual"] < narrow["fit"]["residual"]


@pytest.mark.criterion("7-gen_less")
def test_c7_gen_less_single_eigenstate(report):
    L, n = 8, 3
    spec = full_spectrum(ModelParams(L=L, U=3.0, t_prime=0.75, u_prime=1.5), _canonical_plan(L, n))
    can = sectors_with_n(L, n)
    grid = np.linspace(-12, 16, 2801)
    res = {}
    for T in (2.0, 4.0):
        e = canonical_energy(spec, can, 1.0 / T)
        lab = min(can, key=lambda s: np.abs(spec[s].energies - e).min())
        k = int(np.argmin(np.abs(spec[lab].energies - e)))
        psi = dephase(eigenstate(spec, lab, k), spec[lab])
        lo = broaden(correlator_poles(psi, spec, "lesser", 0, 0, "up"), 0.1, "lorentzian", grid)
        gr = broaden(correlator_poles(psi, spec, "greater", 0, 0, "up"), 0.1, "lorentzian", grid)
        res[T] = fit_beta_mu(lo, gr).residual
    report(f"residual at T=4: {res[4.0]:.4f}, at T=2: {res[2.0]:.4f}")
    assert res[4.0] < res[2.0]


# ------------------------------------------------------------------ 8

@pytest.mark.criterion("8")
@pytest.mark.extended
def test_c8_l10_ramp_ensemble(report):
    L = 10
    p = ModelParams(L=L, U=10.0)
    spec = full_spectrum(p, _canonical_plan(L, L), translation="auto")
    sch = ExpSchedule(490.0, 5.0, 10.0)
    states = [ramp_prepare(neel_state(L, o), p, sch, tau=50.0, tol=1e-8) for o in ("up_first", "down_first")]
    ens = dephase_ensemble(mega_ensemble(states, "uniform", None, spec), spec)
    m = energy_matched_beta(spec, ens.energy(spec), n=L)
    lo = correlator_poles(ens, spec, "lesser", 0, 0, "up", family="density")
    gr = correlator_poles(ens, spec, "greater", 0, 0, "up", family="density")
    f = fit_beta_density(lo, gr)
    report(f"energy-matched beta {m.beta:.3f}, density-fit beta {f.beta:.3f}")
    assert abs(m.beta - 2.7) <= 0.15
    assert 1.7 <= f.beta <= 2.5

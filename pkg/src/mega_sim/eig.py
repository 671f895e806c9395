"""Full-spectrum exact diagonalisation per particle sector."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np
from scipy import sparse

from .errors import DomainError, ResourceError
from .fock import build_sector_basis, sector_dim
from .model import ModelParams, SparseOperator, build_hamiltonian
from .symmetry import momentum_blocks

log = logging.getLogger(__name__)

DENSE_CAP = 20000
HERMITIAN_TOL = 1e-12


@dataclass
class SectorSpectrum:
    """Eigen-decomposition of one sector, eigenvalues ascending.

    Either ``vectors`` holds the dense eigenvector columns in the sector basis,
    or the spectrum came from momentum blocks and ``blocks`` holds
    ``(embedding, block_vectors, global_columns)`` triples.  ``expand`` and
    ``project`` work for both layouts.
    """

    label: tuple[int, int]
    energies: np.ndarray
    vectors: Optional[np.ndarray] = None
    blocks: Optional[list] = None
    momenta: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.energies.size

    @property
    def has_vectors(self) -> bool:
        return self.vectors is not None or (
            self.blocks is not None and all(b[1] is not None for b in self.blocks))

    def _need_vectors(self):
        if not self.has_vectors:
            raise DomainError(f"sector {self.label} was diagonalised without eigenvectors")

    def expand(self, cols=None) -> np.ndarray:
        """Eigenvectors (sector basis) for the global column indices ``cols``."""
        self._need_vectors()
        if cols is None:
            cols = np.arange(self.dim)
        cols = np.atleast_1d(np.asarray(cols))
        if self.vectors is not None:
            return self.vectors[:, cols]
        out = np.zeros((self.dim, cols.size), dtype=complex)
        where = {int(c): i for i, c in enumerate(cols)}
        for emb, V, gcols in self.blocks:
            hit = [(j, where[int(g)]) for j, g in enumerate(gcols) if int(g) in where]
            if hit:
                loc, dst = map(list, zip(*hit))
                out[:, dst] = emb @ V[:, loc]
        return out

    def project(self, X: np.ndarray) -> np.ndarray:
        """Eigenbasis coefficients ``V^dag X`` (rows ordered by energy)."""
        self._need_vectors()
        if self.vectors is not None:
            return self.vectors.conj().T @ X
        X = np.asarray(X)
        out = np.zeros((self.dim,) + X.shape[1:], dtype=complex)
        for emb, V, gcols in self.blocks:
            out[gcols] = V.conj().T @ (emb.conj().T @ X)
        return out

    @property
    def eigenvectors(self) -> np.ndarray:
        return self.expand()

    def degenerate_blocks(self, tol: float = 1e-10) -> list[np.ndarray]:
        """Index groups whose energies agree within ``tol * max(1, |E|)``."""
        E = self.energies
        if E.size == 0:
            return []
        gaps = np.diff(E) > tol * np.maximum(1.0, np.abs(E[1:]))
        starts = np.concatenate([[0], np.nonzero(gaps)[0] + 1, [E.size]])
        return [np.arange(a, b) for a, b in zip(starts[:-1], starts[1:])]


def _check_hermitian(M):
    if sparse.issparse(M):
        asym = abs(M - M.conj().T).max() if M.nnz else 0.0
    else:
        asym = np.abs(M - M.conj().T).max() if M.size else 0.0
    if asym > HERMITIAN_TOL:
        raise DomainError(f"matrix is not Hermitian (max asymmetry {asym:.3e})")


def _dense_eigh(M, want_vectors=True):
    A = M.toarray() if sparse.issparse(M) else np.asarray(M)
    if np.iscomplexobj(A) and not np.abs(A.imag).any():
        A = A.real
    if want_vectors:
        return np.linalg.eigh(A)
    return np.linalg.eigvalsh(A), None


def diagonalize_sector(H, label: tuple[int, int] | None = None,
                       want_vectors: bool = True) -> SectorSpectrum:
    """Complete dense eigen-decomposition of a Hermitian sector matrix."""
    if isinstance(H, SparseOperator):
        label = H.sector_in if label is None else label
        M = H.matrix
    else:
        M = H
    if M.shape[0] != M.shape[1]:
        raise DomainError(f"sector matrix must be square, got {M.shape}")
    _check_hermitian(M)
    E, V = _dense_eigh(M, want_vectors)
    return SectorSpectrum(label=label, energies=E, vectors=V)


def diagonalize_blocked(H: SparseOperator, basis, want_vectors: bool = True) -> SectorSpectrum:
    """Diagonalise one sector block by block in crystal-momentum sectors."""
    M = H.matrix
    _check_hermitian(M)
    parts = []
    for m, emb in enumerate(momentum_blocks(basis)):
        if emb.shape[1] == 0:
            continue
        Hk = (emb.conj().T @ M @ emb)
        E, V = _dense_eigh(Hk, want_vectors)
        parts.append((m, emb, E, V))
    allE = np.concatenate([p[2] for p in parts])
    order = np.argsort(allE, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    blocks, momenta, off = [], np.empty(order.size, dtype=int), 0
    for m, emb, E, V in parts:
        gcols = rank[off:off + E.size]
        momenta[gcols] = m
        blocks.append((emb.tocsr(), V, gcols))
        off += E.size
    return SectorSpectrum(label=H.sector_in, energies=allE[order], blocks=blocks, momenta=momenta)


def all_sectors(L: int) -> list[tuple[int, int]]:
    return list(itertools.product(range(L + 1), repeat=2))


def sectors_with_n(L: int, N: int) -> list[tuple[int, int]]:
    return [(u, N - u) for u in range(L + 1) if 0 <= N - u <= L]


def neighbours(label: tuple[int, int], L: int) -> list[tuple[int, int]]:
    """The sector itself plus the sectors reached by one ladder operator."""
    nu, nd = label
    out = [label]
    for du, dd in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        u, d = nu + du, nd + dd
        if 0 <= u <= L and 0 <= d <= L:
            out.append((u, d))
    return out


def resolve_sectors(L: int, selection) -> list[tuple[int, int]]:
    """``'all'``, ``{'n': N}``, ``{'sector': [u, d], 'neighbours': bool}`` or a list."""
    if selection in (None, "all"):
        return all_sectors(L)
    if isinstance(selection, Mapping):
        if "n" in selection:
            secs = sectors_with_n(L, int(selection["n"]))
        elif "sector" in selection:
            secs = [tuple(selection["sector"])]
        else:
            raise DomainError(f"cannot interpret sector selection {selection!r}")
        if selection.get("neighbours"):
            secs = sorted({s for lab in secs for s in neighbours(lab, L)})
        return secs
    secs = [tuple(int(x) for x in s) for s in selection]
    for u, d in secs:
        if not (0 <= u <= L and 0 <= d <= L):
            raise DomainError(f"sector ({u}, {d}) invalid for L={L}")
    return sorted(set(secs))


@dataclass
class FullSpectrum:
    """Spectra of several sectors of one model, keyed by ``(n_up, n_dn)``."""

    params: ModelParams
    sectors: dict = field(default_factory=dict)

    def __getitem__(self, label) -> SectorSpectrum:
        try:
            return self.sectors[tuple(label)]
        except KeyError:
            raise DomainError(f"sector {tuple(label)} is not in the spectrum") from None

    def __contains__(self, label) -> bool:
        return tuple(label) in self.sectors

    def __iter__(self):
        return iter(sorted(self.sectors))

    def labels(self) -> list[tuple[int, int]]:
        return sorted(self.sectors)

    @property
    def total_dim(self) -> int:
        return sum(s.dim for s in self.sectors.values())

    def ground_energy(self, labels=None) -> float:
        labels = self.labels() if labels is None else labels
        return min(self[l].energies[0] for l in labels if self[l].dim)

    def digest(self) -> str:
        h = hashlib.sha256(self.params.digest().encode())
        for lab in self.labels():
            h.update(repr(lab).encode())
            h.update(np.ascontiguousarray(self[lab].energies).tobytes())
        return h.hexdigest()[:16]


def full_spectrum(params: ModelParams, sectors="all", cap: int = DENSE_CAP,
                  translation: bool | str = "auto", want_vectors: bool = True,
                  threads: int = 1) -> FullSpectrum:
    """Diagonalise every requested sector.

    Sectors larger than ``cap`` need ``translation`` blocking (periodic
    boundaries only); with ``translation='auto'`` blocking is used exactly for
    those sectors.
    """
    labels = resolve_sectors(params.L, sectors)
    plan = []
    for lab in labels:
        d = sector_dim(params.L, *lab)
        blocked = translation is True
        if d > cap:
            if translation is False or not params.periodic:
                raise ResourceError(
                    f"sector {lab} has dimension {d} > dense cap {cap}; enable translation blocking")
            blocked = True
        if blocked and not params.periodic:
            raise DomainError("translation blocking needs periodic boundaries")
        plan.append((lab, blocked))

    def work(item):
        lab, blocked = item
        basis = build_sector_basis(params.L, *lab)
        H = build_hamiltonian(params, basis)
        if blocked:
            return lab, diagonalize_blocked(H, basis, want_vectors)
        return lab, diagonalize_sector(H, lab, want_vectors)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(work, plan))
    else:
        results = [work(item) for item in plan]
    return FullSpectrum(params, dict(results))


# --- persistence ----------------------------------------------------------

CACHE_FORMAT = 1


def _cache_key(params: ModelParams, labels, want_vectors: bool) -> str:
    payload = json.dumps({"params": params.digest(), "sectors": [list(l) for l in labels],
                          "vectors": want_vectors, "format": CACHE_FORMAT})
    return hashlib.sha256(payload.encode()).hexdigest()[:20]


def save_spectrum(spec: FullSpectrum, path) -> None:
    """Write an ``.npz`` archive: ``E_u_d`` / ``V_u_d`` arrays plus a JSON header.

    Blocked sectors are stored expanded only through their eigenvalues and
    block data (``B*``/``W*``/``G*`` per momentum).
    """
    arrays = {"header": np.array(json.dumps({
        "format": CACHE_FORMAT, "params": spec.params.to_dict(),
        "sectors": [list(l) for l in spec.labels()]}))}
    for (u, d), s in spec.sectors.items():
        arrays[f"E_{u}_{d}"] = s.energies
        if s.vectors is not None:
            arrays[f"V_{u}_{d}"] = s.vectors
        if s.blocks is not None:
            arrays[f"M_{u}_{d}"] = s.momenta
            for i, (emb, V, g) in enumerate(s.blocks):
                coo = emb.tocoo()
                arrays[f"B_{u}_{d}_{i}"] = np.stack([coo.row, coo.col]).astype(np.int64)
                arrays[f"Bv_{u}_{d}_{i}"] = coo.data
                arrays[f"Bs_{u}_{d}_{i}"] = np.array(emb.shape)
                arrays[f"G_{u}_{d}_{i}"] = g
                if V is not None:
                    arrays[f"W_{u}_{d}_{i}"] = V
    tmp = f"{path}.tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_spectrum(path) -> FullSpectrum:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        params = ModelParams.from_dict(header["params"])
        sectors = {}
        for u, d in header["sectors"]:
            lab = (u, d)
            E = z[f"E_{u}_{d}"]
            V = z[f"V_{u}_{d}"] if f"V_{u}_{d}" in z else None
            blocks, momenta = None, None
            if f"M_{u}_{d}" in z:
                momenta = z[f"M_{u}_{d}"]
                blocks, i = [], 0
                while f"G_{u}_{d}_{i}" in z:
                    rc = z[f"B_{u}_{d}_{i}"]
                    emb = sparse.csr_matrix((z[f"Bv_{u}_{d}_{i}"], (rc[0], rc[1])),
                                            shape=tuple(z[f"Bs_{u}_{d}_{i}"]))
                    W = z[f"W_{u}_{d}_{i}"] if f"W_{u}_{d}_{i}" in z else None
                    blocks.append((emb, W, z[f"G_{u}_{d}_{i}"]))
                    i += 1
            sectors[lab] = SectorSpectrum(lab, E, V, blocks, momenta)
    return FullSpectrum(params, sectors)


def cached_full_spectrum(params: ModelParams, sectors="all", cache_dir=None,
                         **kwargs) -> tuple[FullSpectrum, str, bool]:
    """``full_spectrum`` backed by an on-disk cache.

    Returns ``(spectrum, cache_key, hit)``.
    """
    labels = resolve_sectors(params.L, sectors)
    want_vectors = kwargs.get("want_vectors", True)
    key = _cache_key(params, labels, want_vectors)
    if cache_dir is None:
        return full_spectrum(params, labels, **kwargs), key, False
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"spectrum_{key}.npz")
    if os.path.exists(path):
        log.info("loading cached spectrum %s", path)
        return load_spectrum(path), key, True
    spec = full_spectrum(params, labels, **kwargs)
    save_spectrum(spec, path)
    return spec, key, False


def merge_spectra(*specs: Iterable[FullSpectrum]) -> FullSpectrum:
    first = specs[0]
    out = FullSpectrum(first.params, {})
    for s in specs:
        if s.params != first.params:
            raise DomainError("cannot merge spectra of different models")
        out.sectors.update(s.sectors)
    return out

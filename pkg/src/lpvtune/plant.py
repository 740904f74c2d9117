"""Synthetic position-dependent modal motion plants and their frozen FRFs.

A plant is given by second-order equations of motion
``M x'' + D x' + K(p) x = G(p) f`` with measured outputs ``y = H(p) x``.
``G``, ``H`` and ``K`` depend affinely on the scheduling vector ``p``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .frf import FrequencyGrid, FrfSet, LocalFrf
from .lti import StateSpace


class PlantError(ValueError):
    pass


def _affine(base: np.ndarray, slopes: Sequence[np.ndarray], p) -> np.ndarray:
    out = np.array(base, dtype=float)
    p = np.zeros(len(slopes)) if p is None else np.asarray(p, dtype=float).ravel()
    for pk, Gk in zip(p, slopes):
        out = out + pk * Gk
    return out


@dataclass(frozen=True)
class ModalPlant:
    """Second-order plant with affine scheduling of G, H and K.

    Parameters
    ----------
    M, K : (nx, nx) arrays
        Mass and (nominal) stiffness, kg and N/m.
    G0 : (nx, nf) array
        Nominal force distribution.
    n_rb : int
        Number of rigid-body modes (zero eigenvalues of the stiffness pencil).
    D : (nx, nx) array, optional
        Physical damping. Only its modal diagonal is used.
    modal_damping : sequence of float, optional
        Damping ratio per flexible mode. Overrides ``D`` when given.
    G_sched, H_sched, K_sched : lists of arrays
        Slopes of the affine maps, one per scheduling variable.
    H0 : (ny, nx) array, optional
        Output map. Defaults to the identity (all coordinates measured).
    scheduling_box : (np, 2) array, optional
    """

    M: np.ndarray
    K: np.ndarray
    G0: np.ndarray
    n_rb: int
    D: Optional[np.ndarray] = None
    modal_damping: Optional[Sequence[float]] = None
    G_sched: tuple = ()
    H0: Optional[np.ndarray] = None
    H_sched: tuple = ()
    K_sched: tuple = ()
    scheduling_box: Optional[np.ndarray] = None

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        nx = M.shape[0]
        G0 = np.asarray(self.G0, dtype=float).reshape(nx, -1)
        H0 = np.eye(nx) if self.H0 is None else np.asarray(self.H0, dtype=float).reshape(-1, nx)
        for name, mat in (("M", M), ("K", K)):
            if mat.shape != (nx, nx) or not np.allclose(mat, mat.T):
                raise PlantError(f"{name} must be a real symmetric {nx}x{nx} matrix")
        if np.linalg.eigvalsh(M).min() <= 0:
            raise PlantError("M must be positive definite")
        D = None
        if self.D is not None:
            D = np.atleast_2d(np.asarray(self.D, dtype=float))
            if D.shape != (nx, nx) or not np.allclose(D, D.T):
                raise PlantError("D must be real symmetric")
            if np.linalg.eigvalsh(D).min() < -1e-9 * max(1.0, np.abs(D).max()):
                raise PlantError("D must be positive semidefinite")
        G_sched = tuple(np.asarray(g, dtype=float).reshape(G0.shape) for g in self.G_sched)
        H_sched = tuple(np.asarray(h, dtype=float).reshape(H0.shape) for h in self.H_sched)
        K_sched = tuple(np.asarray(k, dtype=float).reshape(nx, nx) for k in self.K_sched)
        n_sched = max(len(G_sched), len(H_sched), len(K_sched))
        G_sched += tuple(np.zeros_like(G0) for _ in range(n_sched - len(G_sched)))
        H_sched += tuple(np.zeros_like(H0) for _ in range(n_sched - len(H_sched)))
        K_sched += tuple(np.zeros_like(K) for _ in range(n_sched - len(K_sched)))
        box = self.scheduling_box
        if box is not None:
            box = np.asarray(box, dtype=float).reshape(n_sched, 2)
        if not 0 <= self.n_rb <= nx:
            raise PlantError("n_rb out of range")
        for attr, val in (("M", M), ("K", K), ("G0", G0), ("H0", H0), ("D", D),
                          ("G_sched", G_sched), ("H_sched", H_sched),
                          ("K_sched", K_sched), ("scheduling_box", box)):
            object.__setattr__(self, attr, val)

    @property
    def nx(self) -> int:
        return self.M.shape[0]

    @property
    def n_sched(self) -> int:
        return len(self.G_sched)

    def G(self, p=None) -> np.ndarray:
        return _affine(self.G0, self.G_sched, p)

    def H(self, p=None) -> np.ndarray:
        return _affine(self.H0, self.H_sched, p)

    def stiffness(self, p=None) -> np.ndarray:
        return _affine(self.K, self.K_sched, p)

    def box_vertices(self) -> np.ndarray:
        if self.scheduling_box is None:
            return np.zeros((1, self.n_sched))
        lo, hi = self.scheduling_box[:, 0], self.scheduling_box[:, 1]
        corners = np.array(np.meshgrid(*zip(lo, hi), indexing="ij")).reshape(self.n_sched, -1).T
        return np.vstack([corners, 0.5 * (lo + hi)])


@dataclass(frozen=True)
class PartitionedModalSS:
    """Modal state space at one operating point.

    Each mode carries the state pair ``(q, dq/dt)`` so the rigid-body blocks
    are ``[[0, 1], [0, 0]]`` and flexible blocks ``[[0, 1], [-w^2, -2 z w]]``.
    """

    A_RB: np.ndarray
    A_FM: np.ndarray
    B_RB: np.ndarray
    B_FM: np.ndarray
    C_RB: np.ndarray
    C_FM: np.ndarray
    frequencies: np.ndarray
    damping: np.ndarray
    p: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_rb(self) -> int:
        return self.A_RB.shape[0] // 2

    def assembled(self) -> StateSpace:
        A = scipy.linalg.block_diag(self.A_RB, self.A_FM)
        B = np.vstack([self.B_RB, self.B_FM])
        C = np.hstack([self.C_RB, self.C_FM])
        return StateSpace(A, B, C, np.zeros((C.shape[0], B.shape[1])))


def _mode_blocks(omegas, zetas, gamma, psi):
    """Per-mode 2x2 blocks, input rows ``[0; gamma_i]``, output cols ``[psi_i, 0]``."""
    n = len(omegas)
    A = np.zeros((2 * n, 2 * n))
    B = np.zeros((2 * n, gamma.shape[1]))
    C = np.zeros((psi.shape[0], 2 * n))
    for i, (w, z) in enumerate(zip(omegas, zetas)):
        A[2 * i:2 * i + 2, 2 * i:2 * i + 2] = [[0.0, 1.0], [-w * w, -2.0 * z * w]]
        B[2 * i + 1] = gamma[i]
        C[:, 2 * i] = psi[:, i]
    return A, B, C


def modal_transform(plant: ModalPlant, p=None, zero_tol: float = 1e-9) -> PartitionedModalSS:
    """Mass-normalized modal decomposition grouped into RB and flexible parts."""
    p = np.zeros(plant.n_sched) if p is None else np.asarray(p, dtype=float).ravel()
    K = plant.stiffness(p)
    try:
        lam, V = scipy.linalg.eigh(K, plant.M)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise PlantError(f"eigen-solver failure: {exc}") from exc
    scale = max(abs(lam).max(), 1.0)
    if lam.min() < -zero_tol * scale:
        raise PlantError("K must be positive semidefinite")
    n_zero = int(np.sum(np.abs(lam) <= zero_tol * scale))
    if n_zero != plant.n_rb:
        raise PlantError(f"mode-count mismatch: {n_zero} zero eigenvalues, n_rb = {plant.n_rb}")
    lam = np.where(np.abs(lam) <= zero_tol * scale, 0.0, lam)
    omegas = np.sqrt(lam)

    if plant.modal_damping is not None:
        zetas_fm = np.asarray(plant.modal_damping, dtype=float)
        if zetas_fm.size != plant.nx - plant.n_rb:
            raise PlantError("modal_damping needs one ratio per flexible mode")
    elif plant.D is not None:
        c = np.diag(V.T @ plant.D @ V)
        if np.any(np.abs(c[:plant.n_rb]) > 1e-9 * max(1.0, np.abs(c).max())):
            raise PlantError("damping acts on rigid-body modes")
        zetas_fm = c[plant.n_rb:] / (2 * omegas[plant.n_rb:])
    else:
        zetas_fm = np.zeros(plant.nx - plant.n_rb)

    gamma = V.T @ plant.G(p)
    psi = plant.H(p) @ V
    r = plant.n_rb
    A_RB, B_RB, C_RB = _mode_blocks(np.zeros(r), np.zeros(r), gamma[:r], psi[:, :r])
    A_FM, B_FM, C_FM = _mode_blocks(omegas[r:], zetas_fm, gamma[r:], psi[:, r:])
    return PartitionedModalSS(A_RB, A_FM, B_RB, B_FM, C_RB, C_FM,
                              omegas[r:], zetas_fm, p)


@dataclass(frozen=True)
class DecouplingPair:
    T_u: np.ndarray
    T_y: np.ndarray


def rb_decoupling(ss: PartitionedModalSS, p=None, rank_tol: float = 1e-10) -> DecouplingPair:
    """Pseudo-inverse input/output decoupling of the rigid-body channels.

    ``ss`` is already evaluated at its operating point; ``p`` is accepted for
    symmetry with the frozen-FRF call and checked against it.
    """
    if p is not None and ss.p.size and not np.allclose(np.ravel(p), ss.p):
        raise PlantError("modal state space was evaluated at a different operating point")
    r = ss.n_rb
    sel_vel = np.kron(np.eye(r), [[0.0, 1.0]])
    sel_pos = np.kron(np.eye(r), [[1.0, 0.0]])
    b_map = sel_vel @ ss.B_RB
    c_map = ss.C_RB @ sel_pos.T
    for name, mat in (("input", b_map), ("output", c_map)):
        if np.linalg.matrix_rank(mat, tol=rank_tol * max(1.0, np.abs(mat).max())) < r:
            raise PlantError(f"rank-deficient rigid-body {name} map at p = {ss.p.tolist()}")
    return DecouplingPair(np.linalg.pinv(b_map), np.linalg.pinv(c_map))


def _check_resonance(ss: PartitionedModalSS, omega: np.ndarray):
    for w, z in zip(ss.frequencies, ss.damping):
        if z == 0:
            hit = np.flatnonzero(np.abs(omega - w) <= 1e-12 * w)
            if hit.size:
                raise PlantError(
                    f"singular resolvent at undamped resonance: omega[{hit[0]}] = {omega[hit[0]]}")


def decoupled_system(ss: PartitionedModalSS, pair: DecouplingPair) -> StateSpace:
    """State-space realization of ``T_y P T_u``."""
    full = ss.assembled()
    return StateSpace(full.A, full.B @ pair.T_u, pair.T_y @ full.C,
                      np.zeros((pair.T_y.shape[0], pair.T_u.shape[1])))


def frozen_frf(ss: PartitionedModalSS, pair: DecouplingPair, grid: FrequencyGrid,
               p=None, ts: Optional[float] = None) -> LocalFrf:
    """Decoupled frozen FRF ``T_y C (jw I - A)^-1 B T_u`` on ``grid``.

    With ``ts`` the response is evaluated on the unit circle of the Tustin
    image of the plant, i.e. at ``s = (2/ts) j tan(w ts / 2)``.
    """
    omega = grid.omega
    if ts is None:
        s = 1j * omega
    else:
        if omega[-1] > math.pi / ts:
            raise PlantError("grid exceeds the Nyquist frequency")
        s = 1j * (2.0 / ts) * np.tan(omega * ts / 2.0)
    _check_resonance(ss, s.imag)
    sys = decoupled_system(ss, pair)
    try:
        resp = sys.evaluate(s)
    except np.linalg.LinAlgError as exc:
        raise PlantError(f"singular resolvent on the grid: {exc}") from exc
    point = ss.p if p is None else np.asarray(p, dtype=float)
    return LocalFrf(point, resp)


def sample_frf_set(plant: ModalPlant, grid: FrequencyGrid, points,
                   decouple_per_point: bool = True, ts: Optional[float] = None) -> FrfSet:
    """One RB-decoupled local FRF per operating point."""
    points = np.asarray(points, dtype=float)
    points = points.reshape(len(points), -1) if points.ndim else points.reshape(1, 1)
    # a scheduling-independent plant accepts any operating-point labels
    if plant.n_sched and points.shape[1] != plant.n_sched:
        raise PlantError(f"points have dimension {points.shape[1]}, plant has {plant.n_sched}")
    box = plant.scheduling_box
    if box is not None:
        for p in points:
            if np.any(p < box[:, 0] - 1e-12) or np.any(p > box[:, 1] + 1e-12):
                raise PlantError(f"operating point {p.tolist()} outside scheduling box")
    nominal_pair = None
    if not decouple_per_point:
        nominal = np.zeros(plant.n_sched) if box is None else box.mean(axis=1)
        nominal_pair = rb_decoupling(modal_transform(plant, nominal))
    locs = []
    for p in points:
        ss = modal_transform(plant, p)
        pair = rb_decoupling(ss) if nominal_pair is None else nominal_pair
        locs.append(frozen_frf(ss, pair, grid, p, ts=ts))
    return FrfSet(grid, tuple(locs), rb_decoupled=True, ts=ts, scheduling_box=box)


def closed_form_rb_limit(omega: float) -> complex:
    """Asymptotic rigid-body response ``1/(j omega)^2``."""
    return 1.0 / (1j * omega) ** 2


# -- plant description files -------------------------------------------------

def plant_from_dict(doc: dict) -> ModalPlant:
    try:
        return ModalPlant(
            M=doc["M"], K=doc["K"], G0=doc["G0"], n_rb=int(doc["n_rb"]),
            D=doc.get("D"), modal_damping=doc.get("modal_damping"),
            G_sched=tuple(doc.get("G_k", ())), H0=doc.get("H0"),
            H_sched=tuple(doc.get("H_k", ())), K_sched=tuple(doc.get("K_k", ())),
            scheduling_box=doc.get("scheduling_box"))
    except KeyError as exc:
        raise PlantError(f"plant description missing key {exc}") from exc


def plant_to_dict(plant: ModalPlant) -> dict:
    doc = {"M": plant.M.tolist(), "K": plant.K.tolist(), "G0": plant.G0.tolist(),
           "H0": plant.H0.tolist(), "n_rb": plant.n_rb,
           "G_k": [g.tolist() for g in plant.G_sched],
           "H_k": [h.tolist() for h in plant.H_sched],
           "K_k": [k.tolist() for k in plant.K_sched]}
    if plant.D is not None:
        doc["D"] = plant.D.tolist()
    if plant.modal_damping is not None:
        doc["modal_damping"] = list(map(float, plant.modal_damping))
    if plant.scheduling_box is not None:
        doc["scheduling_box"] = plant.scheduling_box.tolist()
    return doc


def load_plant(path) -> ModalPlant:
    return plant_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def demo_plant(lpv: bool = True, damping: float = 0.02,
               flex_rad: tuple = (600.0, 900.0), shift: float = 0.2) -> ModalPlant:
    """Two 2-mass chains: 2 rigid-body channels and 2 flexible modes.

    Flexible modes sit at ``flex_rad`` rad/s. With ``lpv`` the actuator and sensor locations move
    with the single scheduling variable ``p`` in ``[-1, 1]`` and the spring
    stiffness scales by ``1 + shift * p``, moving the flexible frequencies by
    roughly +/-10 %.
    """
    wa, wb = flex_rad
    ka, kb = wa ** 2 / 2.0, wb ** 2 / 2.0
    M = np.eye(4)

    def chain(k):
        return k * np.array([[1.0, -1.0], [-1.0, 1.0]])

    K = scipy.linalg.block_diag(chain(ka), chain(kb))
    G0 = np.array([[0.6, 0.05], [0.4, 0.15], [0.15, 0.4], [0.05, 0.6]])
    H0 = np.array([[0.7, 0.3, 0.1, 0.0], [0.0, 0.1, 0.3, 0.7]])
    if not lpv:
        return ModalPlant(M=M, K=K, G0=G0, n_rb=2, H0=H0, modal_damping=[damping, damping])
    G1 = np.array([[0.3, 0.0], [-0.1, 0.05], [0.0, -0.1], [0.0, 0.3]])
    H1 = np.array([[-0.2, 0.2, 0.0, 0.0], [0.0, 0.0, 0.2, -0.2]])
    K1 = shift * K
    return ModalPlant(M=M, K=K, G0=G0, n_rb=2, H0=H0, modal_damping=[damping, damping],
                      G_sched=(G1,), H_sched=(H1,), K_sched=(K1,),
                      scheduling_box=[[-1.0, 1.0]])

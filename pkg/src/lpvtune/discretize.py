"""Tustin discretization that keeps the continuous-time controller matrices.

Every integrator ``1/s`` of the realization ``dx = A x + B u`` is replaced
by the inverse r-operator

    lam(k+1) = lam(k) + v(k) / 2,     x(k) = 2 Ts lam(k) + Ts v(k) / 2,

with ``v = A x + B u``. The matrices ``A, B, C, D`` are stored untouched;
the algebraic loop through ``x`` is resolved once by factoring
``I - A Ts / 2``.

Optional prewarping at ``w0`` replaces ``Ts`` inside the update law by
``tau = 2 tan(w0 Ts / 2) / w0`` so the DT response matches the CT response
exactly at ``w0``; the sample period itself is unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg

from .controller import ControllerStructure
from .lti import StateSpace


class DiscretizationError(ValueError):
    """Ill-posed r-operator interconnection or invalid sampling setup."""


def _check_well_posed(A: np.ndarray, ts: float, rtol: float = 1e-12):
    if A.size == 0:
        return
    lam = np.linalg.eigvals(A)
    gap = np.abs(1 - lam * ts / 2)
    k = int(np.argmin(gap))
    if gap[k] <= rtol * max(1.0, abs(lam[k] * ts / 2)):
        raise DiscretizationError(
            f"ill-posed: det(I - A Ts/2) = 0, eigenvalue {lam[k]:.6g} of A equals 2/Ts = {2 / ts:.6g}")


@dataclass(frozen=True)
class DtController:
    """CT matrices, sampling time and the pre-factored r-operator update."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    ts: float
    theta: Optional[np.ndarray] = None
    _lu: tuple = field(default=None, repr=False, compare=False)
    prewarp_at: Optional[float] = None

    @property
    def nstates(self) -> int:
        return self.A.shape[0]

    @property
    def tau(self) -> float:
        """Step length used inside the update law (``Ts`` unless prewarped)."""
        return _tau(self.ts, self.prewarp_at)

    def _solve(self, rhs):
        # x = (I - A Ts/2)^-1 rhs
        return scipy.linalg.lu_solve(self._lu, rhs) if self.nstates else rhs

    def realization(self) -> StateSpace:
        """Equivalent DT state space in the auxiliary states ``lam``."""
        n, ts = self.nstates, self.tau
        if n == 0:
            return StateSpace(np.zeros((0, 0)), np.zeros((0, self.D.shape[1])),
                              np.zeros((self.D.shape[0], 0)), self.D)
        F = self._solve(np.eye(n))
        AF = self.A @ F
        Ad = np.eye(n) + ts * AF
        Bd = 0.5 * (ts / 2 * AF @ self.B + self.B)
        Cd = 2 * ts * self.C @ F
        Dd = self.D + ts / 2 * self.C @ F @ self.B
        return StateSpace(Ad, Bd, Cd, Dd)

    def frequency_response(self, omega) -> np.ndarray:
        """Response at ``z = exp(j omega Ts)``, shape ``(nf, ny, nu)``."""
        omega = np.asarray(omega, dtype=float)
        if np.any(omega > np.pi / self.ts * (1 + 1e-12)):
            raise DiscretizationError("frequency above the Nyquist limit pi/Ts")
        return self.realization().evaluate(np.exp(1j * omega * self.ts))

    def initial_state(self) -> np.ndarray:
        return np.zeros(self.nstates)

    def step(self, u, lam):
        """One sample: returns ``(y(k), lam(k+1))``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        lam = np.asarray(lam, dtype=float)
        if lam.shape != (self.nstates,):
            raise DiscretizationError(f"state has shape {lam.shape}, expected ({self.nstates},)")
        if self.nstates == 0:
            return self.D @ u, lam
        tau = self.tau
        x = self._solve(2 * tau * lam + tau / 2 * (self.B @ u))
        v = self.A @ x + self.B @ u
        return self.C @ x + self.D @ u, lam + 0.5 * v

    def simulate(self, u_seq, lam0=None) -> np.ndarray:
        """Output sequence for inputs ``u_seq`` shaped ``(N, nu)``."""
        u_seq = np.asarray(u_seq, dtype=float).reshape(len(u_seq), -1)
        lam = self.initial_state() if lam0 is None else np.asarray(lam0, dtype=float)
        out = np.empty((len(u_seq), self.D.shape[0]))
        for k, u in enumerate(u_seq):
            out[k], lam = self.step(u, lam)
        return out


def _tau(ts: float, prewarp_at: Optional[float]) -> float:
    if prewarp_at is None:
        return ts
    return 2 * np.tan(prewarp_at * ts / 2) / prewarp_at


def discretize(ct: StateSpace, ts: float, theta=None,
               prewarp_at: Optional[float] = None) -> DtController:
    """Wrap a closed CT controller with the inverse r-operator.

    Parameters
    ----------
    ct : StateSpace
        Closed CT controller; its matrices are stored verbatim.
    ts : float
        Sampling time in seconds.
    theta : array_like, optional
        Parameter vector kept alongside for export.
    prewarp_at : float, optional
        Frequency in rad/s, below ``pi/Ts``, where the DT response is made
        to match the CT response exactly. Off by default (plain Tustin).
    """
    if not ts > 0:
        raise DiscretizationError("Ts must be positive")
    if prewarp_at is not None and not 0 < prewarp_at < np.pi / ts:
        raise DiscretizationError("prewarp frequency must lie in (0, pi/Ts)")
    tau = _tau(ts, prewarp_at)
    _check_well_posed(ct.A, tau)
    lu = None
    if ct.nstates:
        lu = scipy.linalg.lu_factor(np.eye(ct.nstates) - ct.A * tau / 2)
    th = None if theta is None else np.asarray(theta, dtype=float).copy()
    warp = None if prewarp_at is None else float(prewarp_at)
    return DtController(ct.A, ct.B, ct.C, ct.D, float(ts), th, lu, warp)


def simulate_step(dt: DtController, u, state):
    """Functional form of :meth:`DtController.step`."""
    return dt.step(u, state)


def dt_frf(dt: DtController, omega) -> np.ndarray:
    return dt.frequency_response(getattr(omega, "omega", omega))


def tustin_matrices(ct: StateSpace, ts: float) -> StateSpace:
    """Textbook bilinear state-space transform (used as a cross-check)."""
    n = ct.nstates
    M = np.linalg.inv(np.eye(n) - ct.A * ts / 2)
    Ad = M @ (np.eye(n) + ct.A * ts / 2)
    Bd = M @ ct.B * ts
    Cd = ct.C @ M
    Dd = ct.D + ct.C @ M @ ct.B * ts / 2
    return StateSpace(Ad, Bd, Cd, Dd)


class DtScheduledController:
    """Scheduled DT controller: the LFR is frozen at ``p(k)`` in every sample.

    The auxiliary state ``lam`` carries over between samples; its dimension
    does not depend on ``p``.
    """

    def __init__(self, structure: ControllerStructure, theta, ts: float,
                 prewarp_at: Optional[float] = None):
        self.structure = structure
        self.theta = np.asarray(theta, dtype=float)
        self.ts = float(ts)
        self.prewarp_at = prewarp_at
        self._cache: dict = {}
        self.structure.check_box(self.theta)

    def at(self, p) -> DtController:
        key = tuple(np.ravel(p).tolist())
        hit = self._cache.get(key)
        if hit is None:
            hit = discretize(self.structure.closed(self.theta, p), self.ts, self.theta,
                             self.prewarp_at)
            self._cache[key] = hit
        return hit

    def initial_state(self) -> np.ndarray:
        return self.at(np.zeros(self.structure.n_sched)).initial_state()

    def step(self, u, lam, p):
        return self.at(p).step(u, lam)

    def simulate(self, u_seq, p_seq, lam0=None) -> np.ndarray:
        u_seq = np.asarray(u_seq, dtype=float).reshape(len(u_seq), -1)
        lam = self.initial_state() if lam0 is None else np.asarray(lam0, dtype=float)
        out = np.empty((len(u_seq), self.structure.channels))
        for k, (u, p) in enumerate(zip(u_seq, p_seq)):
            out[k], lam = self.step(u, lam, p)
        return out


def export_dict(structure: ControllerStructure, theta, ts: float,
                prewarp_at: Optional[float] = None) -> dict:
    """Everything a real-time host needs to rebuild the update law.

    The fixed LFR block is affine in ``p``; it is exported as the block at
    ``p = 0`` plus one increment per scheduling variable, together with the
    latent parameter vector ``phi``. For unscheduled structures the closed
    CT matrices are included as well. ``tau`` is the step length inside the
    update law; it equals ``ts`` unless ``prewarp_at`` is given.
    """
    theta = np.asarray(theta, dtype=float)
    structure.check_box(theta)
    if prewarp_at is not None and not 0 < prewarp_at < np.pi / ts:
        raise DiscretizationError("prewarp frequency must lie in (0, pi/Ts)")
    tau = _tau(float(ts), prewarp_at)
    n_sched = structure.n_sched
    blk0, slot_index = structure.lfr(np.zeros(n_sched))

    def mats(blk):
        return {"A": blk.A.tolist(), "B": blk.B.tolist(), "C": blk.C.tolist(),
                "D": blk.D.tolist()}

    increments = []
    for k in range(n_sched if structure.is_scheduled else 0):
        e = np.zeros(n_sched)
        e[k] = 1.0
        blk, _ = structure.lfr(e)
        increments.append({"A": (blk.A - blk0.A).tolist(), "B": (blk.B - blk0.B).tolist(),
                           "C": (blk.C - blk0.C).tolist(), "D": (blk.D - blk0.D).tolist()})
    doc = {
        "ts": float(ts),
        "tau": float(tau),
        "prewarp_at": prewarp_at,
        "structure": structure.to_dict(theta),
        "lfr": {"n_latent": blk0.n_par, "at_zero": mats(blk0), "increments": increments,
                "phi": theta[slot_index].tolist()},
        "update_law": "lam(k+1) = lam(k) + v(k)/2, x(k) = 2 tau lam(k) + tau v(k)/2, "
                      "v = A x + B u, y = C x + D u",
    }
    if not structure.is_scheduled:
        ct = structure.closed(theta)
        _check_well_posed(ct.A, tau)
        doc["ct"] = {"A": ct.A.tolist(), "B": ct.B.tolist(), "C": ct.C.tolist(),
                     "D": ct.D.tolist()}
    return doc


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def save_controller(path, structure: ControllerStructure, theta, ts: Optional[float],
                    extra: Optional[dict] = None, prewarp_at: Optional[float] = None) -> None:
    """Tuned-controller file: resolved structure plus the DT realization data."""
    doc = {"structure": structure.to_dict(theta)}
    if ts is not None:
        doc["discrete"] = export_dict(structure, theta, ts, prewarp_at)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_default), encoding="utf-8")

"""Minimal real state-space container and frequency-response evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StateSpace:
    """Continuous-time LTI system ``dx = A x + B u, y = C x + D u``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        nx = A.shape[0] if A.size else 0
        ny, nu = D.shape
        B = np.asarray(self.B, dtype=float).reshape(nx, nu)
        C = np.asarray(self.C, dtype=float).reshape(ny, nx)
        A = A.reshape(nx, nx)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @property
    def nstates(self) -> int:
        return self.A.shape[0]

    @property
    def ninputs(self) -> int:
        return self.D.shape[1]

    @property
    def noutputs(self) -> int:
        return self.D.shape[0]

    def evaluate(self, s) -> np.ndarray:
        """Transfer matrix ``C (sI - A)^-1 B + D`` at complex points ``s``.

        Returns an array of shape ``(len(s), ny, nu)``.
        """
        s = np.atleast_1d(np.asarray(s, dtype=complex))
        out = np.broadcast_to(self.D, (s.size, *self.D.shape)).astype(complex)
        if self.nstates == 0:
            return out
        eye = np.eye(self.nstates)
        lhs = s[:, None, None] * eye - self.A
        rhs = np.broadcast_to(self.B, (s.size, *self.B.shape))
        x = np.linalg.solve(lhs, rhs)
        return out + self.C @ x

    def evaluate_modal(self, s, max_cond: float = 1e8) -> np.ndarray:
        """Same as :meth:`evaluate` through an eigendecomposition of ``A``.

        Much cheaper on long grids; falls back to direct solves when the
        eigenvector basis is ill-conditioned (near-defective ``A``).
        """
        s = np.atleast_1d(np.asarray(s, dtype=complex))
        if self.nstates == 0:
            return self.evaluate(s)
        lam, V = np.linalg.eig(self.A)
        if np.linalg.cond(V) > max_cond:
            return self.evaluate(s)
        cv = self.C @ V
        wb = np.linalg.solve(V, self.B)
        res = 1.0 / (s[:, None] - lam)
        return self.D + (cv * res[:, None, :]) @ wb

    def freqresp(self, omega) -> np.ndarray:
        """Frequency response at ``s = j*omega``."""
        return self.evaluate(1j * np.asarray(omega, dtype=float))

    def poles(self) -> np.ndarray:
        return np.linalg.eigvals(self.A) if self.nstates else np.zeros(0, complex)


def series(first: StateSpace, second: StateSpace) -> StateSpace:
    """Signal passes through ``first`` then ``second`` (transfer second*first)."""
    if first.noutputs != second.ninputs:
        raise ValueError(
            f"series dimension mismatch: {first.noutputs} outputs into "
            f"{second.ninputs} inputs")
    n1, n2 = first.nstates, second.nstates
    A = np.block([
        [first.A, np.zeros((n1, n2))],
        [second.B @ first.C, second.A],
    ])
    B = np.vstack([first.B, second.B @ first.D])
    C = np.hstack([second.D @ first.C, second.C])
    D = second.D @ first.D
    return StateSpace(A, B, C, D)


def closed_loop_matrix(plant: StateSpace, ctrl: StateSpace) -> np.ndarray:
    """State matrix of the negative unity feedback loop ``u = -K y``.

    Used as the eigenvalue ground truth for Nyquist-based verdicts.
    """
    if plant.noutputs != ctrl.ninputs or ctrl.noutputs != plant.ninputs:
        raise ValueError("plant/controller dimensions incompatible")
    # u = -(Cc xc + Dc y), y = Cp xp + Dp u
    Minv = np.linalg.inv(np.eye(plant.ninputs) + ctrl.D @ plant.D)
    u_p = -Minv @ ctrl.D @ plant.C
    u_c = -Minv @ ctrl.C
    y_p = plant.C + plant.D @ u_p
    y_c = plant.D @ u_c
    return np.block([
        [plant.A + plant.B @ u_p, plant.B @ u_c],
        [ctrl.B @ y_p, ctrl.A + ctrl.B @ y_c],
    ])

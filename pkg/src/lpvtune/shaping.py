"""Piecewise-affine shaping weights and the weighted four-block norm.

For each local loop the closed-loop maps ``S``, ``K S``, ``S P`` and
``K S P`` are scaled on the output side by diagonal weights and the norm is
the largest singular value over the grid and the four blocks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .controller import ControllerStructure
from .frf import FrfSet, LocalFrf
from .stability import LoopSet, loop_transfers

BLOCKS = ("S", "KS", "SP", "KSP")


def _check(omega, omega_bw, alpha):
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise ValueError("frequency must be > 0")
    if not alpha > 1:
        raise ValueError("alpha must be > 1")
    if not omega_bw > 0:
        raise ValueError("omega_bw must be > 0")
    return omega


def sensitivity_weight(omega, omega_bw: float, alpha: float, ks: float = 0.5):
    """``ks (omega_bw/alpha)^3 / omega^3`` up to ``omega_bw/alpha``, then ``ks``."""
    omega = _check(omega, omega_bw, alpha)
    corner = omega_bw / alpha
    return np.where(omega <= corner, ks * (corner / omega) ** 3, ks)


def comp_or_control_weight(omega, omega_bw: float, alpha: float, kr: float = 0.5):
    """``kr`` up to ``alpha omega_bw``, then ``kr omega / (alpha omega_bw)``."""
    omega = _check(omega, omega_bw, alpha)
    corner = alpha * omega_bw
    return np.where(omega >= corner, kr * omega / corner, kr)


def process_weight(omega, omega_bw: float, alpha: float, kp_scale: float = 1.0):
    """Vee shape: ``1/omega`` below ``omega_bw/alpha``, flat, ``omega`` above ``alpha omega_bw``."""
    omega = _check(omega, omega_bw, alpha)
    lo, hi = omega_bw / alpha, alpha * omega_bw
    return kp_scale * np.where(omega <= lo, lo / omega, np.where(omega >= hi, omega / hi, 1.0))


def channel_scalings(frf: LocalFrf, omega, omega_bw, margin: float = 0.5):
    """``(kr_scale, kp_scale)`` per channel from ``|P_jj(j omega_bw)|``.

    The magnitude is interpolated linearly in log-log coordinates;
    ``kr_scale`` carries the extra ``margin`` factor, ``kp_scale`` is the
    plain reciprocal.
    """
    omega = np.asarray(omega, dtype=float)
    m = frf.shape[0]
    omega_bw = np.broadcast_to(np.asarray(omega_bw, dtype=float), (m,))
    if np.any(omega_bw < omega[0]) or np.any(omega_bw > omega[-1]):
        raise ValueError("omega_bw outside the grid span")
    mags = np.abs(np.diagonal(frf.response, axis1=1, axis2=2))
    if np.any(mags == 0):
        raise ValueError("zero plant magnitude on the diagonal")
    logw = np.log(omega)
    at_bw = np.empty(m)
    for j in range(m):
        k = np.flatnonzero(omega == omega_bw[j])
        # on a grid point the sample is used as is
        at_bw[j] = mags[k[0], j] if k.size else \
            np.exp(np.interp(np.log(omega_bw[j]), logw, np.log(mags[:, j])))
    return margin * at_bw, 1.0 / at_bw


@dataclass(frozen=True)
class WeightSet:
    """Configuration of the four diagonal weights.

    ``kr_mode="scaled"`` gives the control-sensitivity weight the constant
    ``kr * |P_jj(j omega_bw)|``; ``"fixed"`` uses ``kr`` as is. The
    ``K S P`` weight always uses ``kr``.
    """

    omega_bw: tuple
    alpha: float = 2.0
    ks: float = 0.5
    kr: float = 0.5
    kr_mode: str = "scaled"

    def __post_init__(self):
        bw = tuple(float(v) for v in np.atleast_1d(self.omega_bw))
        if any(v <= 0 for v in bw):
            raise ValueError("omega_bw must be > 0")
        if not self.alpha > 1:
            raise ValueError("alpha must be > 1")
        if self.kr_mode not in ("scaled", "fixed"):
            raise ValueError("kr_mode must be 'scaled' or 'fixed'")
        object.__setattr__(self, "omega_bw", bw)

    def targets(self, m: int) -> np.ndarray:
        if len(self.omega_bw) == 1:
            return np.full(m, self.omega_bw[0])
        if len(self.omega_bw) != m:
            raise ValueError(f"{len(self.omega_bw)} target bandwidths for {m} channels")
        return np.array(self.omega_bw)

    def evaluate(self, omega, frf: LocalFrf) -> dict:
        """Weights per block, each shaped ``(nf, m)``."""
        omega = np.asarray(omega, dtype=float)
        m = frf.shape[0]
        bw = self.targets(m)
        kr_scale, kp_scale = channel_scalings(frf, omega, bw, margin=self.kr)
        if self.kr_mode == "fixed":
            kr_scale = np.full(m, self.kr)
        cols = {name: [] for name in BLOCKS}
        for j in range(m):
            cols["S"].append(sensitivity_weight(omega, bw[j], self.alpha, self.ks))
            cols["KS"].append(comp_or_control_weight(omega, bw[j], self.alpha, kr_scale[j]))
            cols["SP"].append(process_weight(omega, bw[j], self.alpha, kp_scale[j]))
            cols["KSP"].append(comp_or_control_weight(omega, bw[j], self.alpha, self.kr))
        return {name: np.stack(v, axis=1) for name, v in cols.items()}

    def to_dict(self) -> dict:
        return {"omega_bw": list(self.omega_bw), "alpha": self.alpha, "ks": self.ks,
                "kr": self.kr, "kr_mode": self.kr_mode}


def closed_loop_blocks(P, K) -> Optional[dict]:
    """``S, KS, SP, KSP`` per frequency, or ``None`` if ``I + P K`` is singular."""
    P, K = np.asarray(P, dtype=complex), np.asarray(K, dtype=complex)
    m = P.shape[-1]
    try:
        S = np.linalg.inv(np.eye(m) + P @ K)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(S)):
        return None
    KS = K @ S
    return {"S": S, "KS": KS, "SP": S @ P, "KSP": KS @ P}


def sigma_max(X) -> np.ndarray:
    """Largest singular value over the last two axes (closed form up to 2x2)."""
    X = np.asarray(X)
    if X.shape[-2:] == (1, 1):
        return np.abs(X[..., 0, 0])
    if X.shape[-2:] == (2, 2):
        fro = np.sum(np.abs(X) ** 2, axis=(-2, -1))
        det = np.abs(X[..., 0, 0] * X[..., 1, 1] - X[..., 0, 1] * X[..., 1, 0])
        disc = np.sqrt(np.maximum(fro ** 2 - 4 * det ** 2, 0.0))
        return np.sqrt((fro + disc) / 2)
    return np.linalg.svd(X, compute_uv=False)[..., 0]


def block_norms(P, K, weights: dict) -> dict:
    """Peak weighted largest singular value per block (``inf`` if singular)."""
    blocks = closed_loop_blocks(P, K)
    if blocks is None:
        return {name: np.inf for name in BLOCKS}
    return {name: float(sigma_max(weights[name][..., :, None] * blocks[name]).max())
            for name in BLOCKS}


def local_norm(frf: LocalFrf, omega, K, weights: WeightSet) -> float:
    norms = block_norms(frf.response, K, weights.evaluate(omega, frf))
    return max(norms.values())


def weighted_norms(loops: LoopSet, frfs: FrfSet, weights: WeightSet) -> np.ndarray:
    """Weighted norm of every local loop."""
    return np.array([local_norm(loc, frfs.omega, loops.controller[i], weights)
                     for i, loc in enumerate(frfs.locals)])


def weighted_norm(frfs: FrfSet, structure: ControllerStructure, theta,
                  weights: WeightSet):
    """``(per-lFRF norms, overall max)``."""
    norms = weighted_norms(loop_transfers(frfs, structure, theta), frfs, weights)
    return norms, float(norms.max())


def sensitivity_peaks_db(P, K) -> np.ndarray:
    """Peak ``|S_jj|`` per channel in dB."""
    blocks = closed_loop_blocks(P, K)
    if blocks is None:
        return np.full(P.shape[-1], np.inf)
    mags = np.abs(np.diagonal(blocks["S"], axis1=-2, axis2=-1)).max(axis=0)
    return 20 * np.log10(mags)


def crossover_frequencies(omega, P, K) -> np.ndarray:
    """First 0 dB crossing of ``|P_jj K_jj|`` per channel (log-log interpolated).

    ``nan`` where the diagonal loop never crosses from above.
    """
    omega = np.asarray(omega, dtype=float)
    mag = np.abs(np.diagonal(np.asarray(P) @ np.asarray(K), axis1=-2, axis2=-1))
    out = np.full(mag.shape[1], np.nan)
    for j in range(mag.shape[1]):
        above = mag[:, j] >= 1.0
        idx = np.flatnonzero(above[:-1] & ~above[1:])
        if idx.size:
            k = idx[0]
            y0, y1 = np.log(mag[k, j]), np.log(mag[k + 1, j])
            x0, x1 = np.log(omega[k]), np.log(omega[k + 1])
            out[j] = np.exp(x0 + (0.0 - y0) * (x1 - x0) / (y1 - y0))
    return out


def write_weight_preview(path, omega, frf: LocalFrf, weights: WeightSet) -> None:
    """CSV of reciprocal weights (the bounds) per block and channel."""
    w = weights.evaluate(omega, frf)
    m = frf.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["omega"] + [f"bound_{b}_{j + 1}" for b in BLOCKS for j in range(m)])
        for k, om in enumerate(omega):
            writer.writerow([repr(float(om))] +
                            [repr(float(1.0 / w[b][k, j])) for b in BLOCKS for j in range(m)])


def write_sensitivity_csv(path, loops: LoopSet) -> None:
    """``|S_jj|`` and ``|L_jj|`` per local loop and channel."""
    m = loops.plant.shape[-1]
    header = ["lfrf", "omega"] + [f"abs_S{j + 1}" for j in range(m)] + \
        [f"abs_L{j + 1}" for j in range(m)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(loops.plant.shape[0]):
            P, K = loops.plant[i], loops.controller[i]
            blocks = closed_loop_blocks(P, K)
            if blocks is None:
                continue
            s = np.abs(np.diagonal(blocks["S"], axis1=-2, axis2=-1))
            ell = np.abs(np.diagonal(P @ K, axis1=-2, axis2=-1))
            for k, om in enumerate(loops.omega):
                writer.writerow([i, repr(float(om))] + [repr(float(v)) for v in s[k]] +
                                [repr(float(v)) for v in ell[k]])


def write_bode_loop_csv(path, loops: LoopSet) -> None:
    """Magnitude (dB) and phase (deg) of each diagonal loop ``P_jj K_jj``."""
    m = loops.plant.shape[-1]
    header = ["lfrf", "omega"]
    for j in range(m):
        header += [f"mag_db_L{j + 1}", f"phase_deg_L{j + 1}"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(loops.plant.shape[0]):
            ell = np.diagonal(loops.plant[i] @ loops.controller[i], axis1=-2, axis2=-1)
            phase = np.degrees(np.unwrap(np.angle(ell), axis=0))
            for k, om in enumerate(loops.omega):
                row = [i, repr(float(om))]
                for j in range(m):
                    row += [repr(float(20 * np.log10(abs(ell[k, j])))), repr(float(phase[k, j]))]
                writer.writerow(row)

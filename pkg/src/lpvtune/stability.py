"""Local closed-loop stability from FRF data.

The return difference of each local loop factors as

    det(I + L) = det(I + E T) * prod_j (1 + L_jj)

with ``E = (L - Ld) Ld^-1`` the interaction term, ``Ld`` the diagonal loop
and ``T = Ld (I + Ld)^-1``. Integrators live in the scalar factors, whose
winding numbers are counted with an analytic low-frequency closure; the
matrix factor must not encircle the origin.

Images are sampled on positive grid frequencies. The negative-frequency half
follows from conjugate symmetry. Below the first grid point the contour is
closed by ``n_int`` clockwise half-turns at infinite radius; above the last
one the image is assumed to have settled near 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .controller import ControllerError, ControllerStructure
from .frf import FrfSet

TOL_ORIGIN = 1e-6
MAX_STEP_DEG = 90.0


class StabilityError(ValueError):
    """A sub-computation could not produce a decidable result."""


class OriginProximityError(StabilityError):
    pass


class ResolutionError(StabilityError):
    pass


@dataclass(frozen=True)
class IntegratorDeclaration:
    """Open-loop integrators per diagonal channel and RHP pole count.

    ``p_ol_channels`` optionally splits ``p_ol`` over the scalar factors;
    without it every RHP pole is booked against the total only.
    """

    n_int: tuple
    p_ol: int = 0
    p_ol_channels: Optional[tuple] = None

    def __post_init__(self):
        n_int = tuple(int(v) for v in np.atleast_1d(self.n_int))
        if any(v < 0 for v in n_int):
            raise ValueError("integrator counts must be >= 0")
        if self.p_ol < 0:
            raise ValueError("p_ol must be >= 0")
        object.__setattr__(self, "n_int", n_int)
        if self.p_ol_channels is not None:
            split = tuple(int(v) for v in self.p_ol_channels)
            if len(split) != len(n_int) or sum(split) != self.p_ol or min(split) < 0:
                raise ValueError("p_ol_channels must be one count per channel summing to p_ol")
            object.__setattr__(self, "p_ol_channels", split)

    @classmethod
    def for_structure(cls, structure: ControllerStructure, plant_integrators: int = 2,
                      p_ol: int = 0) -> "IntegratorDeclaration":
        """Plant RB double integrators plus the integrators of the filter chain."""
        return cls(tuple(plant_integrators + structure.integrators()), p_ol)


@dataclass(frozen=True)
class LoopSet:
    """Plant, controller and loop responses, each shaped ``(n, nf, m, m)``."""

    omega: np.ndarray
    points: np.ndarray
    plant: np.ndarray
    controller: np.ndarray
    ts: Optional[float] = None

    @property
    def loops(self) -> np.ndarray:
        return self.plant @ self.controller


@dataclass
class StabilityVerdict:
    """Outcome for one local loop.

    ``status`` is ``"stable"``, ``"unstable"`` or ``"undetermined"``.
    ``windings`` lists the matrix factor first, then one entry per channel.
    """

    status: str
    windings: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    min_distance: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    contour: str = "D"

    @property
    def stable(self) -> bool:
        return self.status == "stable"

    def to_dict(self) -> dict:
        return {"status": self.status, "windings": self.windings, "targets": self.targets,
                "min_distance": [float(d) for d in self.min_distance],
                "warnings": list(self.warnings), "contour": self.contour}


def tustin_s(omega, ts: float) -> np.ndarray:
    """Laplace point that the bilinear map sends to ``z = exp(j omega ts)``."""
    return 2j / ts * np.tan(np.asarray(omega, dtype=float) * ts / 2)


def controller_response(structure: ControllerStructure, theta, p, omega,
                        ts: Optional[float] = None, fast: bool = False) -> np.ndarray:
    """Frozen controller on the grid; on the unit circle when ``ts`` is given.

    ``fast`` closes and evaluates the filters one by one.
    """
    s = 1j * np.asarray(omega, dtype=float) if ts is None else tustin_s(omega, ts)
    if fast:
        return structure.response(theta, p, s)
    return structure.closed(theta, p).evaluate(s)


def loop_transfers(frfs: FrfSet, structure: ControllerStructure, theta) -> LoopSet:
    """Controller frozen at every local operating point, paired with the plant."""
    if structure.channels != frfs.n_rb:
        raise ControllerError(
            f"controller has {structure.channels} channels, FRF data has {frfs.n_rb}")
    ctrl = np.stack([controller_response(structure, theta, loc.p, frfs.omega, frfs.ts)
                     for loc in frfs.locals])
    return LoopSet(frfs.omega, frfs.points(), frfs.responses(), ctrl, frfs.ts)


def _diag(x):
    return np.diagonal(x, axis1=-2, axis2=-1)


def _product(P, K):
    # explicit sum keeps diagonal and scalar products bit-identical to P_jj K_jj
    return (P[..., :, :, None] * K[..., None, :, :]).sum(axis=-2)


def interaction_term(P, K) -> np.ndarray:
    """``E = (P K - Pd Kd)(Pd Kd)^-1`` per frequency, ``P, K`` shaped ``(nf, m, m)``."""
    P, K = np.asarray(P, dtype=complex), np.asarray(K, dtype=complex)
    d = _diag(P) * _diag(K)
    bad = np.argwhere(d == 0)
    if bad.size:
        raise StabilityError(f"singular diagonal loop at grid index {bad[0][0]} "
                             f"(channel {bad[0][1]})")
    off = _product(P, K) - d[..., :, None] * np.eye(P.shape[-1])
    return off / d[..., None, :]


def factorized_images(P, K):
    """Matrix factor ``det(I + E T)`` and scalar factors ``1 + P_jj K_jj``.

    Returns ``(gamma0 (nf,), gammas (nf, m))``. ``E T`` is formed as
    ``(L - Ld)(I + Ld)^-1`` so it stays finite where ``Ld`` vanishes.
    """
    P, K = np.asarray(P, dtype=complex), np.asarray(K, dtype=complex)
    L = _product(P, K)
    d = _diag(P) * _diag(K)
    gammas = 1.0 + d
    bad = np.argwhere(gammas == 0)
    if bad.size:
        raise StabilityError(f"diagonal loop marginally critical at grid index {bad[0][0]}")
    m = L.shape[-1]
    et = (L - d[..., :, None] * np.eye(m)) / gammas[..., None, :]
    gamma0 = np.linalg.det(np.eye(m) + et)
    return gamma0, gammas


def winding_number(image, critical: complex = 0.0, closure_half_turns: int = 0,
                   mirror: bool = True, tol_origin: float = TOL_ORIGIN,
                   max_step_deg: float = MAX_STEP_DEG) -> int:
    """Net counterclockwise encirclements of ``critical``.

    With ``mirror`` the samples are the positive-frequency half of a
    Nyquist image and the contour is completed by conjugate symmetry plus
    the analytic closures. Without it the samples form a closed curve by
    themselves and only ``closure_half_turns`` clockwise half-turns are
    added.
    """
    g = np.asarray(image, dtype=complex).ravel() - critical
    if g.size < 2:
        raise StabilityError("image needs at least 2 samples")
    dist = np.abs(g)
    if dist.min() <= tol_origin:
        k = int(np.argmin(dist))
        raise OriginProximityError(
            f"image passes within {dist[k]:.3g} of the critical point at sample {k}")
    limit = np.radians(max_step_deg)
    steps = np.angle(g[1:] / g[:-1])
    if np.any(np.abs(steps) > limit):
        k = int(np.argmax(np.abs(steps) > limit))
        raise ResolutionError(
            f"argument jumps {np.degrees(abs(steps[k])):.1f} deg between samples {k} and {k + 1}")
    if not mirror:
        total = steps.sum() + np.angle(g[0] / g[-1]) - np.pi * closure_half_turns
        return int(np.rint(total / (2 * np.pi)))
    low = _closure(np.angle(g[0]), -np.pi * closure_half_turns, "low", limit)
    high = _closure(-np.angle(g[-1]), 0.0, "high", limit)
    total = 2 * steps.sum() + low + high
    return int(np.rint(total / (2 * np.pi)))


def _closure(half_angle, target, end, limit):
    # arc joining conj(g) and g (or g and conj(g)): 2*half_angle modulo 2 pi,
    # picking the branch closest to the asymptotic prediction
    delta = 2 * half_angle
    delta += 2 * np.pi * np.rint((target - delta) / (2 * np.pi))
    if abs(delta - target) > limit:
        raise ResolutionError(
            f"{end}-frequency closure off by {np.degrees(abs(delta - target)):.1f} deg: "
            f"grid does not reach the asymptotic regime")
    return delta


def assess_loop(P, K, decl: IntegratorDeclaration, tol_origin: float = TOL_ORIGIN,
                max_step_deg: float = MAX_STEP_DEG, discrete: bool = False) -> StabilityVerdict:
    """Verdict for one local loop from plant and controller samples ``(nf, m, m)``."""
    contour = "C" if discrete else "D"
    P = np.asarray(P, dtype=complex)
    K = np.asarray(K, dtype=complex)
    m = P.shape[-1]
    if len(decl.n_int) != m:
        return StabilityVerdict("undetermined", contour=contour, warnings=[
            f"integrator declaration has {len(decl.n_int)} channels, loop has {m}"])
    try:
        gamma0, gammas = factorized_images(P, K)
    except StabilityError as exc:
        return StabilityVerdict("undetermined", contour=contour, warnings=[str(exc)])
    images = [gamma0] + [gammas[:, j] for j in range(m)]
    closures = [0] + list(decl.n_int)
    if decl.p_ol_channels is not None:
        targets = [0] + list(decl.p_ol_channels)
    else:
        targets = [0] * (m + 1) if decl.p_ol == 0 else [0] + [None] * m
    dists = [float(np.abs(img).min()) for img in images]
    windings, warnings = [], []
    for k, (img, half_turns) in enumerate(zip(images, closures)):
        name = "gamma0" if k == 0 else f"gamma{k}"
        try:
            windings.append(winding_number(img, 0.0, half_turns, True, tol_origin, max_step_deg))
        except StabilityError as exc:
            windings.append(None)
            warnings.append(f"{name}: {exc}")
    if warnings:
        # the full determinant is smooth where a factor nearly cancels another one;
        # it can still prove instability
        try:
            total = winding_number(gamma0 * np.prod(gammas, axis=1), 0.0, sum(decl.n_int), True,
                                   tol_origin, max_step_deg)
        except StabilityError as exc:
            warnings.append(f"det(I+L): {exc}")
        else:
            if total != decl.p_ol:
                warnings.append(f"det(I+L) winds {total} times, expected {decl.p_ol}")
                return StabilityVerdict("unstable", windings, targets, dists, warnings,
                                        contour)
        return StabilityVerdict("undetermined", windings, targets, dists, warnings, contour)
    if sum(windings) != decl.p_ol:
        # the total is the winding of det(I + L): the generalized Nyquist test itself
        return StabilityVerdict("unstable", windings, targets, dists, warnings, contour)
    if windings[0] == 0 and all(t is None or w == t for w, t in zip(windings, targets)):
        return StabilityVerdict("stable", windings, targets, dists, warnings, contour)
    # a diagonal loop is unstable on its own and the MIMO factor compensates;
    # the factor-wise certificate does not apply
    warnings.append(f"factor windings {windings} miss their targets {targets} "
                    "although the total matches")
    return StabilityVerdict("undetermined", windings, targets, dists, warnings, contour)


def assess_loopset(loops: LoopSet, decl: IntegratorDeclaration, **kw) -> list:
    discrete = loops.ts is not None
    return [assess_loop(loops.plant[i], loops.controller[i], decl, discrete=discrete, **kw)
            for i in range(loops.plant.shape[0])]


def assess_stability(frfs: FrfSet, structure: ControllerStructure, theta,
                     decl: IntegratorDeclaration, **kw) -> list:
    """One verdict per local FRF; sub-errors yield ``"undetermined"``."""
    try:
        loops = loop_transfers(frfs, structure, theta)
    except ControllerError as exc:
        return [StabilityVerdict("undetermined", warnings=[str(exc)])
                for _ in frfs.locals]
    return assess_loopset(loops, decl, **kw)


def write_nyquist_csv(path, loops: LoopSet) -> None:
    """Factor images per local loop: ``lfrf, omega, re/im gamma0, re/im gamma_j``."""
    m = loops.plant.shape[-1]
    header = ["lfrf", "omega", "re_gamma0", "im_gamma0"]
    for j in range(1, m + 1):
        header += [f"re_gamma{j}", f"im_gamma{j}"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(loops.plant.shape[0]):
            try:
                g0, gs = factorized_images(loops.plant[i], loops.controller[i])
            except StabilityError:
                continue
            for k, w in enumerate(loops.omega):
                row = [i, repr(float(w)), repr(g0[k].real), repr(g0[k].imag)]
                for j in range(m):
                    row += [repr(gs[k, j].real), repr(gs[k, j].imag)]
                writer.writerow(row)


def eigen_verdict(a_cl: np.ndarray, discrete: bool = False, margin: float = 0.0) -> bool:
    """Closed-loop stability from the state matrix (the ground truth)."""
    ev = np.linalg.eigvals(a_cl)
    if discrete:
        return bool(np.all(np.abs(ev) < 1 - margin))
    return bool(np.all(ev.real < -margin))


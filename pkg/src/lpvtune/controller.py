"""Structured controller filters in linear fractional form.

Every filter is written as a fixed LTI block whose latent ports close through
a diagonal parameter matrix ``Phi``: ``u_lat = Phi y_lat``. Interconnecting
blocks stacks their latent ports, so the parameter matrix of a whole
controller is ``diag(Phi_1, ..., Phi_nF)`` and holds nothing but tunable
numbers.

Scheduled parameters take the form ``theta0 + theta1 . p``. The product with
``p`` is absorbed into the fixed block (one latent channel per coefficient),
so the parameter matrix carries the coefficients themselves and the fixed
block is evaluated at a frozen ``p``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .lti import StateSpace


class ControllerError(ValueError):
    """Invalid controller structure or parameter set."""


class ControllerDomainError(ControllerError):
    """Scheduled parameter evaluates outside its admissible domain."""


# -- LFR blocks ----------------------------------------------------------------

@dataclass(frozen=True)
class LfrBlock:
    """State-space block with inputs ``[u_lat; u]`` and outputs ``[y_lat; y]``.

    ``slots`` labels each latent channel with the parameter (and scheduling
    coefficient) that closes it.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    n_par: int
    slots: tuple = ()

    def __post_init__(self):
        ss = StateSpace(self.A, self.B, self.C, self.D)
        for name in "ABCD":
            object.__setattr__(self, name, getattr(ss, name))
        if len(self.slots) != self.n_par:
            raise ControllerError("one slot label per latent channel required")
        if self.D.shape[0] < self.n_par or self.D.shape[1] < self.n_par:
            raise ControllerError("latent width exceeds port dimensions")

    @property
    def nstates(self) -> int:
        return self.A.shape[0]

    @property
    def ninputs(self) -> int:
        return self.D.shape[1] - self.n_par

    @property
    def noutputs(self) -> int:
        return self.D.shape[0] - self.n_par

    def parts(self):
        """Return ``(A, Bw, Bu, Cz, Cy, Dzw, Dzu, Dyw, Dyu)`` partitions."""
        k = self.n_par
        return (self.A, self.B[:, :k], self.B[:, k:], self.C[:k], self.C[k:],
                self.D[:k, :k], self.D[:k, k:], self.D[k:, :k], self.D[k:, k:])

    def close(self, phi) -> StateSpace:
        """Close the latent ports with ``Phi = diag(phi)``."""
        phi = np.asarray(phi, dtype=float).ravel()
        if phi.size != self.n_par:
            raise ControllerError(f"expected {self.n_par} parameters, got {phi.size}")
        A, Bw, Bu, Cz, Cy, Dzw, Dzu, Dyw, Dyu = self.parts()
        if self.n_par == 0:
            return StateSpace(A, Bu, Cy, Dyu)
        lhs = np.eye(self.n_par) - Dzw * phi
        try:
            # Phi (I - Dzw Phi)^-1 [Cz Dzu]
            gain = phi[:, None] * np.linalg.solve(lhs, np.hstack([Cz, Dzu]))
        except np.linalg.LinAlgError as exc:
            raise ControllerError("ill-posed LFR closure: I - D11 Phi is singular") from exc
        n = A.shape[0]
        return StateSpace(A + Bw @ gain[:, :n], Bu + Bw @ gain[:, n:],
                          Cy + Dyw @ gain[:, :n], Dyu + Dyw @ gain[:, n:])


class _Builder:
    """Assemble an LfrBlock from linear signal expressions.

    A signal is a dict mapping ``('x', i)``, ``('w', i)`` (latent input) or
    ``('u', i)`` to a coefficient.
    """

    def __init__(self, nx: int, nu: int, p=None):
        self.nx, self.nu = nx, nu
        p = np.zeros(0) if p is None else np.asarray(p, dtype=float).ravel()
        self.pbar = np.concatenate([[1.0], p])
        self.rows: list = []
        self.slots: list = []

    @staticmethod
    def x(i):
        return {("x", i): 1.0}

    @staticmethod
    def u(i):
        return {("u", i): 1.0}

    @staticmethod
    def lin(*terms):
        out: dict = {}
        for coef, sig in terms:
            for key, val in sig.items():
                out[key] = out.get(key, 0.0) + coef * val
        return out

    def mul(self, label, sig, scheduled: bool = False):
        """Signal multiplied by the parameter ``label`` (scheduled or not)."""
        out = {}
        n_coef = self.pbar.size if scheduled else 1
        for k in range(n_coef):
            idx = len(self.slots)
            self.slots.append((*label, k))
            self.rows.append(self.lin((self.pbar[k], sig)))
            out[("w", idx)] = 1.0
        return out

    def _matrix(self, sigs, nw):
        cols = {"x": 0, "w": self.nx, "u": self.nx + nw}
        mat = np.zeros((len(sigs), self.nx + nw + self.nu))
        for r, sig in enumerate(sigs):
            for (kind, i), val in sig.items():
                mat[r, cols[kind] + i] += val
        return mat

    def build(self, dx, y) -> LfrBlock:
        nw = len(self.slots)
        state = self._matrix(dx, nw)
        out = self._matrix(list(self.rows) + list(y), nw)
        A = state[:, :self.nx]
        B = state[:, self.nx:]
        C = out[:, :self.nx]
        D = out[:, self.nx:]
        return LfrBlock(A, B, C, D, nw, tuple(self.slots))


def pi_to_lfr(channels: int) -> LfrBlock:
    """Integral action ``Kp/s`` per channel: ``dx = u, y = Kp x``."""
    if channels < 1:
        raise ControllerError("channels must be >= 1")
    b = _Builder(channels, channels)
    y = [b.mul(("kp", c), b.x(c)) for c in range(channels)]
    return b.build([b.u(c) for c in range(channels)], y)


def lead_to_lfr(channels: int) -> LfrBlock:
    """First-order lead ``(s + Omega1)/(s + Omega2)`` per channel."""
    if channels < 1:
        raise ControllerError("channels must be >= 1")
    b = _Builder(channels, channels)
    dx, y = [], []
    for c in range(channels):
        w1 = b.mul(("omega1", c), b.x(c))
        w2 = b.mul(("omega2", c), b.x(c))
        dx.append(b.lin((-1.0, w2), (1.0, b.u(c))))
        y.append(b.lin((1.0, w1), (-1.0, w2), (1.0, b.u(c))))
    return b.build(dx, y)


NOTCH_PARAMS = ("beta1", "beta2", "omega1", "omega2")


def notch_to_lfr(channels: int, n_sched: int = 0, p=None,
                 scheduled: Optional[Sequence[str]] = None) -> LfrBlock:
    """Notch ``(s^2 + 2 b1 w1 s + w1^2)/(s^2 + 2 b2 w2 s + w2^2)`` per channel.

    States per channel are ``(x1, x2)`` with ``dx1 = -2 b2 w2 x1 - w2^2 x2 + u``,
    ``dx2 = x1`` and ``y = 2(b1 w1 - b2 w2) x1 + (w1^2 - w2^2) x2 + u``.
    Products of parameters are realized by chained latent multiplications.
    ``scheduled`` names the coefficients that depend on ``p``; by default all
    four do when ``n_sched > 0``.
    """
    if channels < 1:
        raise ControllerError("channels must be >= 1")
    if p is None:
        p = np.zeros(n_sched)
    p = np.asarray(p, dtype=float).ravel()
    if p.size != n_sched:
        raise ControllerError(f"operating point has {p.size} entries, n_sched = {n_sched}")
    if scheduled is None:
        scheduled = NOTCH_PARAMS if n_sched > 0 else ()
    sch = {name: (name in scheduled and n_sched > 0) for name in NOTCH_PARAMS}
    b = _Builder(2 * channels, channels, p)
    dx, y = [], []
    for c in range(channels):
        x1, x2 = b.x(2 * c), b.x(2 * c + 1)

        def m(name, sig):
            return b.mul((name, c), sig, sch[name])

        b2w2 = m("beta2", m("omega2", x1))
        w2sq = m("omega2", m("omega2", x2))
        b1w1 = m("beta1", m("omega1", x1))
        w1sq = m("omega1", m("omega1", x2))
        dx.append(b.lin((-2.0, b2w2), (-1.0, w2sq), (1.0, b.u(c))))
        dx.append(x1)
        y.append(b.lin((2.0, b1w1), (-2.0, b2w2), (1.0, w1sq), (-1.0, w2sq), (1.0, b.u(c))))
    return b.build(dx, y)


def gain_to_lfr(channels: int) -> LfrBlock:
    """Static diagonal gain ``y = k u``."""
    b = _Builder(0, channels)
    return b.build([], [b.mul(("k", c), b.u(c)) for c in range(channels)])


def mixing_to_lfr(channels: int) -> LfrBlock:
    """Static full-block matrix ``y = M u``; entry ``(i, j)`` is channel ``i*n + j``."""
    b = _Builder(0, channels)
    y = []
    for i in range(channels):
        y.append(b.lin(*[(1.0, b.mul(("m", i * channels + j), b.u(j)))
                         for j in range(channels)]))
    return b.build([], y)


def _cascade2(g1: LfrBlock, g2: LfrBlock) -> LfrBlock:
    A1, Bw1, Bu1, Cz1, Cy1, Dzw1, Dzu1, Dyw1, Dyu1 = g1.parts()
    A2, Bw2, Bu2, Cz2, Cy2, Dzw2, Dzu2, Dyw2, Dyu2 = g2.parts()
    n1, n2, k1, k2 = A1.shape[0], A2.shape[0], g1.n_par, g2.n_par
    A = np.block([[A1, np.zeros((n1, n2))], [Bu2 @ Cy1, A2]])
    Bw = np.block([[Bw1, np.zeros((n1, k2))], [Bu2 @ Dyw1, Bw2]])
    Bu = np.vstack([Bu1, Bu2 @ Dyu1])
    Cz = np.block([[Cz1, np.zeros((k1, n2))], [Dzu2 @ Cy1, Cz2]])
    Dzw = np.block([[Dzw1, np.zeros((k1, k2))], [Dzu2 @ Dyw1, Dzw2]])
    Dzu = np.vstack([Dzu1, Dzu2 @ Dyu1])
    Cy = np.hstack([Dyu2 @ Cy1, Cy2])
    Dyw = np.hstack([Dyu2 @ Dyw1, Dyw2])
    Dyu = Dyu2 @ Dyu1
    return LfrBlock(A, np.hstack([Bw, Bu]), np.vstack([Cz, Cy]),
                    np.block([[Dzw, Dzu], [Dyw, Dyu]]), k1 + k2, g1.slots + g2.slots)


def _parallel2(g1: LfrBlock, g2: LfrBlock) -> LfrBlock:
    A1, Bw1, Bu1, Cz1, Cy1, Dzw1, Dzu1, Dyw1, Dyu1 = g1.parts()
    A2, Bw2, Bu2, Cz2, Cy2, Dzw2, Dzu2, Dyw2, Dyu2 = g2.parts()
    n1, n2, k1, k2 = A1.shape[0], A2.shape[0], g1.n_par, g2.n_par
    A = np.block([[A1, np.zeros((n1, n2))], [np.zeros((n2, n1)), A2]])
    Bw = np.block([[Bw1, np.zeros((n1, k2))], [np.zeros((n2, k1)), Bw2]])
    Bu = np.vstack([Bu1, Bu2])
    Cz = np.block([[Cz1, np.zeros((k1, n2))], [np.zeros((k2, n1)), Cz2]])
    Dzw = np.block([[Dzw1, np.zeros((k1, k2))], [np.zeros((k2, k1)), Dzw2]])
    Dzu = np.vstack([Dzu1, Dzu2])
    Cy = np.hstack([Cy1, Cy2])
    Dyw = np.hstack([Dyw1, Dyw2])
    Dyu = Dyu1 + Dyu2
    return LfrBlock(A, np.hstack([Bw, Bu]), np.vstack([Cz, Cy]),
                    np.block([[Dzw, Dzu], [Dyw, Dyu]]), k1 + k2, g1.slots + g2.slots)


def interconnect(blocks: Sequence[LfrBlock], kind: str = "cascade",
                 label_blocks: bool = True) -> LfrBlock:
    """Cascade (signal through ``blocks[0]`` first) or parallel (sum) interconnection.

    The latent ports of the result are the constituent ports in declaration
    order. With ``label_blocks`` each slot label is prefixed by the index of
    the block it came from.
    """
    blocks = list(blocks)
    if not blocks:
        raise ControllerError("interconnect needs at least one block")
    if kind not in ("cascade", "parallel"):
        raise ControllerError(f"unknown interconnection kind {kind!r}")
    if label_blocks:
        blocks = [LfrBlock(b.A, b.B, b.C, b.D, b.n_par, tuple((i, *s) for s in b.slots))
                  for i, b in enumerate(blocks)]
    out = blocks[0]
    for nxt in blocks[1:]:
        if kind == "cascade":
            if out.noutputs != nxt.ninputs:
                raise ControllerError(
                    f"dimension mismatch: {out.noutputs} outputs into {nxt.ninputs} inputs")
            out = _cascade2(out, nxt)
        else:
            if (out.ninputs, out.noutputs) != (nxt.ninputs, nxt.noutputs):
                raise ControllerError("dimension mismatch in parallel interconnection")
            out = _parallel2(out, nxt)
    return out


# -- controller structures -----------------------------------------------------

KIND_PARAMS = {
    "pi": ("kp",),
    "lead": ("omega1", "omega2"),
    "notch": NOTCH_PARAMS,
    "gain": ("k",),
    "mixing": ("m",),
}

DEFAULT_BOUNDS = {
    "kp": (1e-2, 1e6),
    "omega1": (1.0, 1e5),
    "omega2": (1.0, 1e5),
    "beta1": (1e-3, 1.0),
    "beta2": (1e-3, 1.0),
    "k": (1e-3, 1e3),
    "m": (-1.0, 1.0),
}

_NOTCH_DEFAULT_BOUNDS = {"omega1": (10.0, 1e5), "omega2": (10.0, 1e5)}

# Parameters that must stay strictly positive (beta1 may reach zero: exact notch).
_POSITIVE = {"kp", "omega1", "omega2", "beta2"}
_NONNEGATIVE = {"beta1"}


@dataclass(frozen=True)
class ParamSpec:
    """One named filter parameter, expanded over channels.

    ``value`` and ``bounds`` refer to the constant coefficient ``theta0``;
    ``slope`` and ``slope_bounds`` to ``theta1`` (shape ``(n_ch, n_sched)``)
    when ``scheduled``.
    """

    name: str
    value: np.ndarray
    bounds: np.ndarray
    fixed: np.ndarray
    scheduled: bool = False
    slope: Optional[np.ndarray] = None
    slope_bounds: Optional[np.ndarray] = None
    scale: str = "log"


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    channels: int
    params: tuple  # of ParamSpec


@dataclass(frozen=True)
class Group:
    interconnect: str
    members: tuple  # FilterSpec or Group


def _per_channel(raw, n, what):
    arr = np.asarray(raw, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    arr = arr.ravel()
    if arr.size != n:
        raise ControllerError(f"{what}: expected scalar or {n} values, got {arr.size}")
    return arr


def _bounds_per_channel(raw, n, what):
    arr = np.asarray(raw, dtype=float)
    if arr.shape == (2,):
        arr = np.tile(arr, (n, 1))
    if arr.shape != (n, 2):
        raise ControllerError(f"{what}: bounds must be [lo, hi] or one pair per channel")
    if np.any(arr[:, 0] > arr[:, 1]):
        raise ControllerError(f"{what}: lower bound above upper bound")
    return arr


def _parse_param(kind, name, raw, n_ch, n_sched, where) -> ParamSpec:
    raw = dict(raw or {})
    unknown = set(raw) - {"fixed", "value", "bounds", "scheduling", "slope",
                          "slope_bounds", "scale"}
    if unknown:
        raise ControllerError(f"{where}.{name}: unknown keys {sorted(unknown)}")
    default_bounds = DEFAULT_BOUNDS[name]
    if kind == "notch" and name in _NOTCH_DEFAULT_BOUNDS:
        default_bounds = _NOTCH_DEFAULT_BOUNDS[name]
    n_entries = n_ch * n_ch if kind == "mixing" else n_ch
    bounds = _bounds_per_channel(raw.get("bounds", default_bounds), n_entries, f"{where}.{name}")
    scale = raw.get("scale", "linear" if name == "m" else "log")
    if scale not in ("log", "linear"):
        raise ControllerError(f"{where}.{name}: scale must be 'log' or 'linear'")
    if scale == "log" and np.any(bounds[:, 0] <= 0):
        raise ControllerError(f"{where}.{name}: log-scaled parameter needs positive bounds")
    if "value" in raw:
        value = _per_channel(raw["value"], n_entries, f"{where}.{name}")
    elif kind == "mixing":
        value = np.eye(n_ch).ravel()
    elif scale == "log":
        value = np.sqrt(bounds[:, 0] * bounds[:, 1])
    else:
        value = bounds.mean(axis=1)
    if "fixed" in raw:
        fixed = np.asarray(raw["fixed"], dtype=bool)
        fixed = np.full(n_entries, bool(fixed)) if fixed.ndim == 0 else fixed.ravel()
        if fixed.size != n_entries:
            raise ControllerError(f"{where}.{name}: 'fixed' must be a bool or one per channel")
    elif kind == "mixing":
        # diagonal of the mixing matrix pinned to its value by default
        fixed = np.eye(n_ch, dtype=bool).ravel()
    else:
        fixed = np.zeros(n_entries, dtype=bool)
    scheduled = bool(raw.get("scheduling", False))
    slope = slope_bounds = None
    if scheduled:
        if kind != "notch":
            raise ControllerError(f"{where}.{name}: only notch parameters can be scheduled")
        if n_sched < 1:
            raise ControllerError(f"{where}.{name}: scheduling requires n_sched >= 1")
        slope = np.asarray(raw.get("slope", 0.0), dtype=float)
        if slope.ndim <= 1 and slope.size in (1, n_sched):
            slope = np.broadcast_to(slope, (n_ch, n_sched)).copy()
        elif slope.size == n_ch * n_sched:
            slope = slope.reshape(n_ch, n_sched)
        else:
            raise ControllerError(f"{where}.{name}: slope must have {n_sched} or "
                                  f"{n_ch}x{n_sched} entries")
        if "slope_bounds" not in raw and not np.all(fixed):
            raise ControllerError(f"{where}.{name}: scheduled free parameter needs 'slope_bounds'")
        sb = np.asarray(raw.get("slope_bounds", [0.0, 0.0]), dtype=float)
        slope_bounds = np.broadcast_to(sb, (n_ch, n_sched, 2)).copy()
        if np.any(slope_bounds[..., 0] > slope_bounds[..., 1]):
            raise ControllerError(f"{where}.{name}: slope lower bound above upper bound")
    return ParamSpec(name, value, bounds, fixed, scheduled, slope, slope_bounds, scale)


class ControllerStructure:
    """Declarative filter chain with tunable parameters.

    Parameters
    ----------
    channels : int
        Number of RB channels (controller is ``channels x channels``).
    root : Group
        Nested interconnection of filters.
    n_sched : int
        Dimension of the scheduling vector.
    scheduling_box : (n_sched, 2) array, optional
        Box over which scheduled parameters must stay admissible.
    """

    def __init__(self, channels: int, root: Group, n_sched: int = 0,
                 scheduling_box=None):
        if channels < 1:
            raise ControllerError("channels must be >= 1")
        self.channels = int(channels)
        self.root = root
        self.n_sched = int(n_sched)
        self.scheduling_box = (None if scheduling_box is None else
                               np.asarray(scheduling_box, dtype=float).reshape(self.n_sched, 2))
        self.leaves: list = []
        self._collect(root)
        if not self.leaves:
            raise ControllerError("structure needs at least one filter")
        self._layout()
        self._lfr_cache: dict = {}

    def _collect(self, node):
        if isinstance(node, Group):
            if node.interconnect not in ("cascade", "parallel"):
                raise ControllerError(f"unknown interconnection kind {node.interconnect!r}")
            for m in node.members:
                self._collect(m)
        else:
            self.leaves.append(node)

    def _layout(self):
        labels, values, lower, upper, free, log = [], [], [], [], [], []
        for leaf_id, leaf in enumerate(self.leaves):
            for ps in leaf.params:
                for ch in range(ps.value.size):
                    labels.append((leaf_id, ps.name, ch, 0))
                    values.append(ps.value[ch])
                    lower.append(ps.bounds[ch, 0])
                    upper.append(ps.bounds[ch, 1])
                    free.append(not ps.fixed[ch])
                    log.append(ps.scale == "log")
                    if ps.scheduled:
                        for k in range(self.n_sched):
                            labels.append((leaf_id, ps.name, ch, k + 1))
                            values.append(ps.slope[ch, k])
                            lower.append(ps.slope_bounds[ch, k, 0])
                            upper.append(ps.slope_bounds[ch, k, 1])
                            free.append(not ps.fixed[ch])
                            log.append(False)
        self.labels = tuple(labels)
        self.index = {lab: i for i, lab in enumerate(labels)}
        self.initial = np.array(values, dtype=float)
        self.lower = np.array(lower, dtype=float)
        self.upper = np.array(upper, dtype=float)
        self.free = np.array(free, dtype=bool)
        self.log_scale = np.array(log, dtype=bool)

    @property
    def n_params(self) -> int:
        return len(self.labels)

    @property
    def n_free(self) -> int:
        return int(self.free.sum())

    @property
    def is_scheduled(self) -> bool:
        return any(ps.scheduled for leaf in self.leaves for ps in leaf.params)

    @property
    def is_diagonal(self) -> bool:
        return all(leaf.kind != "mixing" for leaf in self.leaves)

    # -- LFR assembly

    def _leaf_lfr(self, leaf_id, leaf, p):
        n = leaf.channels
        if leaf.kind == "pi":
            blk = pi_to_lfr(n)
        elif leaf.kind == "lead":
            blk = lead_to_lfr(n)
        elif leaf.kind == "notch":
            sched = [ps.name for ps in leaf.params if ps.scheduled]
            blk = notch_to_lfr(n, self.n_sched, p, scheduled=sched)
        elif leaf.kind == "gain":
            blk = gain_to_lfr(n)
        elif leaf.kind == "mixing":
            blk = mixing_to_lfr(n)
        else:
            raise ControllerError(f"unknown filter kind {leaf.kind!r}")
        return LfrBlock(blk.A, blk.B, blk.C, blk.D, blk.n_par,
                        tuple((leaf_id, *s) for s in blk.slots))

    def _point(self, p):
        # an unscheduled structure ignores the operating-point labels
        if p is None or self.n_sched == 0:
            p = np.zeros(self.n_sched)
        p = np.asarray(p, dtype=float).ravel()
        if p.size != self.n_sched:
            raise ControllerError(f"operating point has {p.size} entries, n_sched = {self.n_sched}")
        return p, (tuple(p.tolist()) if self.is_scheduled else ())

    def lfr(self, p=None):
        """Full controller LFR at a frozen operating point, plus the map from its
        latent channels to entries of the parameter vector. Cached per ``p``."""
        p, key = self._point(p)
        hit = self._lfr_cache.get(key)
        if hit is not None:
            return hit
        counter = itertools.count()

        def build(node):
            if isinstance(node, Group):
                return interconnect([build(m) for m in node.members], node.interconnect,
                                    label_blocks=False)
            leaf_id = next(counter)
            return self._leaf_lfr(leaf_id, node, p)

        blk = build(self.root)
        slot_index = np.array([self.index[s] for s in blk.slots], dtype=int)
        self._lfr_cache[key] = (blk, slot_index)
        return self._lfr_cache[key]

    def leaf_lfrs(self, p=None) -> list:
        """Per-filter ``(LfrBlock, slot_index)`` pairs at ``p`` (cached)."""
        p, key = self._point(p)
        key = ("leaves",) + key
        hit = self._lfr_cache.get(key)
        if hit is None:
            hit = []
            for leaf_id, leaf in enumerate(self.leaves):
                blk = self._leaf_lfr(leaf_id, leaf, p)
                hit.append((blk, np.array([self.index[s] for s in blk.slots], dtype=int)))
            self._lfr_cache[key] = hit
        return hit

    def response(self, theta, p, s) -> np.ndarray:
        """Transfer matrix at Laplace points ``s``, one filter at a time.

        Each filter LFR is closed on its own and the responses are combined
        along the interconnection tree (products for cascades, sums for
        parallel groups). Equivalent to closing :meth:`lfr` but far cheaper
        on long grids.
        """
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ControllerError(f"expected {self.n_params} parameters, got {theta.size}")
        self.check_domain(theta, p)
        leaves = iter(self.leaf_lfrs(p))

        def walk(node):
            if isinstance(node, Group):
                parts = [walk(m) for m in node.members]
                out = parts[0]
                for nxt in parts[1:]:
                    out = nxt @ out if node.interconnect == "cascade" else out + nxt
                return out
            blk, idx = next(leaves)
            return blk.close(theta[idx]).evaluate_modal(s)

        return walk(self.root)

    def evaluate_params(self, theta, p=None) -> dict:
        """Scheduled parameter values at ``p``: ``{(leaf_id, name): array}``."""
        theta = np.asarray(theta, dtype=float)
        p = np.zeros(self.n_sched) if p is None else np.asarray(p, dtype=float).ravel()
        out = {}
        for leaf_id, leaf in enumerate(self.leaves):
            for ps in leaf.params:
                vals = np.empty(ps.value.size)
                for ch in range(ps.value.size):
                    v = theta[self.index[(leaf_id, ps.name, ch, 0)]]
                    if ps.scheduled:
                        v += sum(theta[self.index[(leaf_id, ps.name, ch, k + 1)]] * p[k]
                                 for k in range(self.n_sched))
                    vals[ch] = v
                out[(leaf_id, ps.name)] = vals
        return out

    def check_domain(self, theta, p=None):
        """Raise ControllerDomainError if a parameter is inadmissible at ``p``."""
        for (leaf_id, name), vals in self.evaluate_params(theta, p).items():
            if name in _POSITIVE and np.any(vals <= 0):
                raise ControllerDomainError(
                    f"filter {leaf_id} ({self.leaves[leaf_id].kind}): {name} = "
                    f"{vals.min():.6g} <= 0 at p = {np.ravel(p).tolist() if p is not None else []}")
            if name in _NONNEGATIVE and np.any(vals < 0):
                raise ControllerDomainError(
                    f"filter {leaf_id}: {name} = {vals.min():.6g} < 0")

    def box_points(self) -> np.ndarray:
        """Vertices plus center of the scheduling box."""
        if self.n_sched == 0:
            return np.zeros((1, 0))
        if self.scheduling_box is None:
            return np.zeros((1, self.n_sched))
        lo, hi = self.scheduling_box[:, 0], self.scheduling_box[:, 1]
        verts = np.array(list(itertools.product(*zip(lo, hi))))
        return np.vstack([verts, 0.5 * (lo + hi)])

    def check_box(self, theta):
        for p in self.box_points():
            self.check_domain(theta, p)

    def closed(self, theta, p=None) -> StateSpace:
        """Controller state space with parameters substituted at ``p``."""
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ControllerError(f"expected {self.n_params} parameters, got {theta.size}")
        self.check_domain(theta, p)
        blk, slot_index = self.lfr(p)
        return blk.close(theta[slot_index])

    def integrators(self) -> np.ndarray:
        """Integrator count per channel implied by the filter chain."""

        def count(node):
            if isinstance(node, Group):
                sub = [count(m) for m in node.members]
                return sum(sub) if node.interconnect == "cascade" else max(sub)
            return 1 if node.kind == "pi" else 0

        return np.full(self.channels, count(self.root), dtype=int)

    # -- config I/O

    @classmethod
    def from_dict(cls, doc: dict) -> "ControllerStructure":
        channels = int(doc["channels"])
        n_sched = int(doc.get("n_sched", 0))

        def parse(node, where):
            kind = node.get("kind", "group")
            if kind == "group" or "filters" in node:
                members = tuple(parse(m, f"{where}.filters[{i}]")
                                for i, m in enumerate(node.get("filters", ())))
                if not members:
                    raise ControllerError(f"{where}: group without filters")
                return Group(node.get("interconnect", "cascade"), members)
            kind = {"notch_lti": "notch", "notch_lpv": "notch"}.get(kind, kind)
            if kind not in KIND_PARAMS:
                raise ControllerError(f"{where}: unknown filter kind {node.get('kind')!r}")
            n = int(node.get("channels", channels))
            if n != channels:
                raise ControllerError(f"{where}: filter has {n} channels, structure has {channels}")
            raw_params = dict(node.get("params", {}))
            unknown = set(raw_params) - set(KIND_PARAMS[kind])
            if unknown:
                raise ControllerError(f"{where}: unknown parameters {sorted(unknown)}")
            if node.get("kind") == "notch_lpv":
                for name in NOTCH_PARAMS:
                    raw_params.setdefault(name, {}).setdefault("scheduling", True)
            params = tuple(_parse_param(kind, name, raw_params.get(name), n, n_sched,
                                        f"{where}.params")
                           for name in KIND_PARAMS[kind])
            return FilterSpec(kind, n, params)

        root = parse({"interconnect": doc.get("interconnect", "cascade"),
                      "filters": doc.get("filters", ())}, "structure")
        return cls(channels, root, n_sched, doc.get("scheduling_box"))

    def to_dict(self, theta=None) -> dict:
        """Config document; with ``theta`` the values are the resolved ones."""
        theta = self.initial if theta is None else np.asarray(theta, dtype=float)
        counter = itertools.count()

        def emit(node):
            if isinstance(node, Group):
                return {"kind": "group", "interconnect": node.interconnect,
                        "filters": [emit(m) for m in node.members]}
            leaf_id = next(counter)
            params = {}
            for ps in node.params:
                vals = [theta[self.index[(leaf_id, ps.name, ch, 0)]]
                        for ch in range(ps.value.size)]
                entry = {"fixed": ps.fixed.tolist(), "value": vals,
                         "bounds": ps.bounds.tolist(), "scheduling": ps.scheduled,
                         "scale": ps.scale}
                if ps.scheduled:
                    entry["slope"] = [[theta[self.index[(leaf_id, ps.name, ch, k + 1)]]
                                       for k in range(self.n_sched)]
                                      for ch in range(ps.value.size)]
                    entry["slope_bounds"] = ps.slope_bounds.tolist()
                params[ps.name] = entry
            return {"kind": node.kind, "channels": node.channels, "params": params}

        root = emit(self.root)
        doc = {"channels": self.channels, "n_sched": self.n_sched,
               "interconnect": root["interconnect"], "filters": root["filters"]}
        if self.scheduling_box is not None:
            doc["scheduling_box"] = self.scheduling_box.tolist()
        return doc


def load_structure(path) -> ControllerStructure:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return ControllerStructure.from_dict(doc.get("structure", doc))


@dataclass(frozen=True)
class GeneralizedController:
    """Stacked parameter vector of a structure plus its index map.

    ``phi(p)`` is the diagonal of the consolidated parameter block at ``p``.
    """

    structure: ControllerStructure
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).ravel()
        if theta.size != self.structure.n_params:
            raise ControllerError(
                f"expected {self.structure.n_params} parameters, got {theta.size}")
        object.__setattr__(self, "theta", theta)

    def phi(self, p=None) -> np.ndarray:
        _, slot_index = self.structure.lfr(p)
        return self.theta[slot_index]

    def within_bounds(self) -> bool:
        s = self.structure
        return bool(np.all(self.theta >= s.lower) and np.all(self.theta <= s.upper))


def freeze_controller(structure: ControllerStructure, params, p, omega) -> np.ndarray:
    """Controller frequency response at ``p`` on the grid ``omega`` (rad/s).

    Returns an array of shape ``(nf, channels, channels)``.
    """
    theta = params.theta if isinstance(params, GeneralizedController) else params
    omega = getattr(omega, "omega", omega)
    return structure.closed(theta, p).freqresp(omega)


def demo_structure(channels: int = 2, n_sched: int = 0, lpv_notch: bool = False,
                   bandwidth: float = 60.0, notch_range=(300.0, 1500.0),
                   slope_span: float = 150.0) -> ControllerStructure:
    """PI + three leads + one notch, with bounds scaled around ``bandwidth`` rad/s."""
    wb = float(bandwidth)
    notch_params = {
        "beta1": {"bounds": [1e-3, 0.3], "value": 0.02},
        "beta2": {"bounds": [0.05, 1.0], "value": 0.3},
        "omega1": {"bounds": list(notch_range), "value": float(np.sqrt(np.prod(notch_range)))},
        "omega2": {"bounds": list(notch_range), "value": float(np.sqrt(np.prod(notch_range)))},
    }
    if lpv_notch:
        for name in ("omega1", "omega2"):
            notch_params[name].update(scheduling=True, slope=0.0,
                                      slope_bounds=[-slope_span, slope_span])
    lead = {"omega1": {"bounds": [wb / 20, wb * 2], "value": wb / 3},
            "omega2": {"bounds": [wb / 2, wb * 20], "value": wb * 3}}
    doc = {
        "channels": channels,
        "n_sched": n_sched,
        "interconnect": "cascade",
        "filters": [
            # with the initial leads |lead(j wb)| = 1/3, so 27 wb^3 puts crossover at wb
            {"kind": "pi", "params": {"kp": {"bounds": [wb ** 3 / 10, wb ** 3 * 1e4],
                                             "value": 27 * wb ** 3}}},
            {"kind": "lead", "params": lead},
            {"kind": "lead", "params": lead},
            {"kind": "lead", "params": lead},
            {"kind": "notch", "params": notch_params},
        ],
    }
    if n_sched:
        doc["scheduling_box"] = [[-1.0, 1.0]] * n_sched
    return ControllerStructure.from_dict(doc)

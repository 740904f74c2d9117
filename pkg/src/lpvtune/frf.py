"""Sets of local frequency response functions (lFRFs) and their file format.

The on-disk format is UTF-8 JSON::

    {"format_version": 1, "rb_decoupled": true, "n_rb": 2, "np": 1,
     "frequencies_hz": [f1, ...],
     "locals": [{"p": [...], "response": [[[re, im], ...], ...]}, ...]}

with ``response`` indexed ``[freq][output][input]``. Frequencies are stored
in Hz and exposed in rad/s. Optional keys ``time_domain`` (``"continuous"``
or ``"discrete"``), ``ts`` (sampling time of discrete data, seconds) and
``scheduling_box`` (``[[lo, hi], ...]``) are carried through round trips.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FORMAT_VERSION = 1


class FrfFormatError(ValueError):
    """Malformed or inconsistent FRF data."""


@dataclass(frozen=True)
class FrequencyGrid:
    """Strictly increasing positive frequency grid.

    Hz values are canonical so that file round trips are bit-exact.
    """

    hz: np.ndarray

    def __post_init__(self):
        hz = np.asarray(self.hz, dtype=float).ravel()
        if hz.size < 2:
            raise FrfFormatError(f"frequency grid needs at least 2 points, got {hz.size}")
        if not np.all(np.isfinite(hz)):
            bad = int(np.flatnonzero(~np.isfinite(hz))[0])
            raise FrfFormatError(f"non-finite frequency at index {bad}")
        if hz[0] <= 0:
            raise FrfFormatError("frequencies must be > 0 (index 0)")
        steps = np.diff(hz)
        if np.any(steps <= 0):
            bad = int(np.flatnonzero(steps <= 0)[0]) + 1
            raise FrfFormatError(f"non-increasing grid at index {bad} ({hz[bad]!r} Hz)")
        hz.setflags(write=False)
        object.__setattr__(self, "hz", hz)

    @classmethod
    def from_rad(cls, omega) -> "FrequencyGrid":
        return cls(np.asarray(omega, dtype=float) / (2 * math.pi))

    @classmethod
    def logspace(cls, w_min: float, w_max: float, n: int) -> "FrequencyGrid":
        """Log-spaced grid between ``w_min`` and ``w_max`` rad/s."""
        return cls.from_rad(np.logspace(np.log10(w_min), np.log10(w_max), n))

    @property
    def omega(self) -> np.ndarray:
        return 2 * math.pi * self.hz

    def __len__(self) -> int:
        return self.hz.size


@dataclass(frozen=True)
class LocalFrf:
    """Frozen FRF at one operating point; ``response`` has shape (nf, ny, nu)."""

    p: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).ravel()
        resp = np.asarray(self.response, dtype=complex)
        if resp.ndim != 3:
            raise FrfFormatError(f"response must be 3-D (nf, ny, nu), got shape {resp.shape}")
        if not np.all(np.isfinite(resp)):
            k, i, j = np.argwhere(~np.isfinite(resp))[0]
            raise FrfFormatError(f"non-finite entry at freq {k}, output {i}, input {j}")
        p.setflags(write=False)
        resp.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "response", resp)

    @property
    def shape(self):
        return self.response.shape[1:]


@dataclass(frozen=True)
class FrfSet:
    """A frequency grid plus one or more local FRFs sharing it."""

    grid: FrequencyGrid
    locals: tuple
    rb_decoupled: bool = True
    ts: Optional[float] = None
    scheduling_box: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        locs = tuple(self.locals)
        if len(locs) < 1:
            raise FrfFormatError("n >= 1 violated: FRF set has no local FRFs")
        nf = len(self.grid)
        shape0 = locs[0].shape
        np0 = locs[0].p.size
        for i, loc in enumerate(locs):
            if loc.response.shape[0] != nf:
                raise FrfFormatError(
                    f"local {i}: {loc.response.shape[0]} frequency records, grid has {nf}")
            if loc.shape != shape0:
                raise FrfFormatError(f"local {i}: dimension mismatch {loc.shape} vs {shape0}")
            if loc.p.size != np0:
                raise FrfFormatError(f"local {i}: scheduling dimension {loc.p.size} vs {np0}")
        if shape0[0] != shape0[1]:
            raise FrfFormatError(f"responses must be square after RB decoupling, got {shape0}")
        if self.ts is not None:
            if not self.ts > 0:
                raise FrfFormatError("ts must be positive")
            if self.grid.omega[-1] > math.pi / self.ts * (1 + 1e-12):
                raise FrfFormatError("discrete-time grid exceeds the Nyquist frequency")
        box = self.scheduling_box
        if box is not None:
            box = np.asarray(box, dtype=float).reshape(np0, 2)
            for i, loc in enumerate(locs):
                if np.any(loc.p < box[:, 0]) or np.any(loc.p > box[:, 1]):
                    raise FrfFormatError(f"local {i}: operating point outside scheduling box")
            object.__setattr__(self, "scheduling_box", box)
        object.__setattr__(self, "locals", locs)

    @property
    def n_rb(self) -> int:
        return self.locals[0].shape[0]

    @property
    def n_sched(self) -> int:
        return self.locals[0].p.size

    @property
    def omega(self) -> np.ndarray:
        return self.grid.omega

    @property
    def discrete(self) -> bool:
        return self.ts is not None

    def responses(self) -> np.ndarray:
        """Stacked responses, shape (n, nf, n_rb, n_rb)."""
        return np.stack([loc.response for loc in self.locals])

    def points(self) -> np.ndarray:
        return np.stack([loc.p for loc in self.locals])


def _encode_response(resp: np.ndarray) -> list:
    stacked = np.stack([resp.real, resp.imag], axis=-1)
    return stacked.tolist()


def _decode_response(raw, where: str) -> np.ndarray:
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise FrfFormatError(f"{where}: response is not a rectangular numeric array") from exc
    if arr.ndim != 4 or arr.shape[-1] != 2:
        raise FrfFormatError(
            f"{where}: response must be [freq][output][input][re, im], got shape {arr.shape}")
    return arr[..., 0] + 1j * arr[..., 1]


def frf_to_dict(frfs: FrfSet) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "rb_decoupled": bool(frfs.rb_decoupled),
        "n_rb": frfs.n_rb,
        "np": frfs.n_sched,
        "time_domain": "discrete" if frfs.discrete else "continuous",
    }
    if frfs.ts is not None:
        doc["ts"] = float(frfs.ts)
    if frfs.scheduling_box is not None:
        doc["scheduling_box"] = frfs.scheduling_box.tolist()
    doc["frequencies_hz"] = frfs.grid.hz.tolist()
    doc["locals"] = [
        {"p": loc.p.tolist(), "response": _encode_response(loc.response)}
        for loc in frfs.locals
    ]
    return doc


def frf_from_dict(doc: dict) -> FrfSet:
    if not isinstance(doc, dict):
        raise FrfFormatError("top level must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FrfFormatError(f"unsupported format_version {version!r}")
    for key in ("n_rb", "np", "frequencies_hz", "locals"):
        if key not in doc:
            raise FrfFormatError(f"missing key '{key}'")
    if not doc.get("rb_decoupled", False):
        raise FrfFormatError("rb_decoupled must be true: responses must be RB-decoupled")
    grid = FrequencyGrid(np.asarray(doc["frequencies_hz"], dtype=float))
    n_rb, n_sched = int(doc["n_rb"]), int(doc["np"])
    locs = []
    for i, entry in enumerate(doc["locals"]):
        where = f"locals[{i}]"
        if "p" not in entry or "response" not in entry:
            raise FrfFormatError(f"{where}: needs 'p' and 'response'")
        p = np.asarray(entry["p"], dtype=float).ravel()
        if p.size != n_sched:
            raise FrfFormatError(f"{where}: p has {p.size} entries, np = {n_sched}")
        resp = _decode_response(entry["response"], where)
        if resp.shape[1:] != (n_rb, n_rb):
            raise FrfFormatError(f"{where}: response is {resp.shape[1:]}, n_rb = {n_rb}")
        try:
            locs.append(LocalFrf(p, resp))
        except FrfFormatError as exc:
            raise FrfFormatError(f"{where}: {exc}") from exc
    domain = doc.get("time_domain", "continuous")
    if domain not in ("continuous", "discrete"):
        raise FrfFormatError(f"unknown time_domain {domain!r}")
    ts = doc.get("ts")
    if domain == "discrete" and ts is None:
        raise FrfFormatError("discrete FRF data needs 'ts'")
    if domain == "continuous":
        ts = None
    return FrfSet(grid, tuple(locs), rb_decoupled=True, ts=ts,
                  scheduling_box=doc.get("scheduling_box"))


def load_frf_set(path) -> FrfSet:
    """Read and validate an FRF file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FrfFormatError(f"{path}: parse error at line {exc.lineno} column {exc.colno}") from exc
    try:
        return frf_from_dict(doc)
    except FrfFormatError as exc:
        raise FrfFormatError(f"{path}: {exc}") from exc


def save_frf_set(frfs: FrfSet, path) -> None:
    """Write ``frfs`` in the FRF file format."""
    if not isinstance(frfs, FrfSet):
        raise TypeError("expected an FrfSet")
    Path(path).write_text(json.dumps(frf_to_dict(frfs)), encoding="utf-8")


def make_frf_set(omega: Sequence[float], points, responses, **kwargs) -> FrfSet:
    """Convenience constructor from rad/s grid, point list and response list."""
    grid = FrequencyGrid.from_rad(omega)
    locs = tuple(LocalFrf(p, r) for p, r in zip(points, responses))
    return FrfSet(grid, locs, **kwargs)

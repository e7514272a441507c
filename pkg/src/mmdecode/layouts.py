"""Electrode layouts: 10-20 style channel names with unit-sphere positions.

Positions are generated from the idealized spherical 10-10 construction:
midline electrodes sit on the nasion-inion great circle at 10% steps, the
outer ring sits at 18 degrees elevation, intermediate rows are great-circle
interpolations between their midline electrode and ring electrode, and the
'9/10' channels (FT9, P10, ...) sit on the equator.

Layout files are plain text, one channel per line: name, x, y, z.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

_RING_ELEV = np.deg2rad(18.0)


@dataclass(frozen=True)
class ChannelLayout:
    names: tuple[str, ...]
    positions: np.ndarray  # (n, 3), unit norm

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise ValueError("channel names must be unique")
        pos = np.asarray(self.positions, dtype=float)
        if pos.shape != (len(self.names), 3):
            raise ValueError(f"positions shape {pos.shape} does not match {len(self.names)} names")
        norms = np.linalg.norm(pos, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("positions must lie on the unit sphere (|r| = 1 within 1e-6)")
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"channel {name!r} not in layout") from None

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def subset(self, names) -> "ChannelLayout":
        idx = [self.index(n) for n in names]
        return ChannelLayout(tuple(names), self.positions[idx])


def save_layout(layout: ChannelLayout, path) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        for name, (x, y, z) in zip(layout.names, layout.positions):
            fh.write(f"{name} {x:.9f} {y:.9f} {z:.9f}\n")
    os.replace(tmp, path)


def load_layout(path) -> ChannelLayout:
    names, rows = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'name x y z', got {line!r}")
            names.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    pos = np.asarray(rows)
    norms = np.linalg.norm(pos, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"{path}: zero-length position vector")
    return ChannelLayout(tuple(names), pos / norms)


def _sagittal(alpha_deg: float) -> np.ndarray:
    """Point on the nasion->vertex->inion circle; 0 = nasion, 90 = vertex."""
    a = np.deg2rad(alpha_deg)
    return np.array([0.0, np.cos(a), np.sin(a)])


def _ring(azimuth_deg: float, elev: float = _RING_ELEV) -> np.ndarray:
    """Point at fixed elevation; azimuth 0 = front, positive = toward the left."""
    a = np.deg2rad(azimuth_deg)
    return np.array([-np.sin(a) * np.cos(elev), np.cos(a) * np.cos(elev), np.sin(elev)])


def _slerp(u: np.ndarray, v: np.ndarray, t: float) -> np.ndarray:
    omega = np.arccos(np.clip(u @ v, -1.0, 1.0))
    if omega < 1e-12:
        return u.copy()
    return (np.sin((1 - t) * omega) * u + np.sin(t * omega) * v) / np.sin(omega)


def _build_positions() -> dict[str, np.ndarray]:
    pos: dict[str, np.ndarray] = {}
    midline = ["Fpz", "AFz", "Fz", "FCz", "Cz", "CPz", "Pz", "POz", "Oz", "Iz"]
    for i, name in enumerate(midline):
        pos[name] = _sagittal(18.0 * (i + 1))
    ring = ["Fp", "AF7", "F7", "FT7", "T7", "TP7", "P7", "PO7", "O"]
    for i, stem in enumerate(ring):
        az = 18.0 * (i + 1)
        left = stem + "1" if stem in ("Fp", "O") else stem
        right = (stem + "2") if stem in ("Fp", "O") else stem.replace("7", "8")
        pos[left] = _ring(az)
        pos[right] = _ring(-az)
    rows = {
        "F": ("Fz", "F7", "F8", ["1", "3", "5"], [0.25, 0.5, 0.75]),
        "FC": ("FCz", "FT7", "FT8", ["1", "3", "5"], [0.25, 0.5, 0.75]),
        "C": ("Cz", "T7", "T8", ["1", "3", "5"], [0.25, 0.5, 0.75]),
        "CP": ("CPz", "TP7", "TP8", ["1", "3", "5"], [0.25, 0.5, 0.75]),
        "P": ("Pz", "P7", "P8", ["1", "3", "5"], [0.25, 0.5, 0.75]),
        "AF": ("AFz", "AF7", "AF8", ["3"], [0.5]),
        "PO": ("POz", "PO7", "PO8", ["3"], [0.5]),
    }
    for stem, (mid, lref, rref, digits, fracs) in rows.items():
        for digit, frac in zip(digits, fracs):
            pos[stem + digit] = _slerp(pos[mid], pos[lref], frac)
            rdigit = str(int(digit) + 1)
            pos[stem + rdigit] = _slerp(pos[mid], pos[rref], frac)
    # below-ring channels on the equator
    for stem, az in (("FT", 72.0), ("T", 90.0), ("TP", 108.0), ("P", 126.0)):
        pos[stem + "9"] = _ring(az, elev=0.0)
        pos[stem + "10"] = _ring(-az, elev=0.0)
    pos["Iz"] = _sagittal(180.0)
    for name, p in pos.items():
        pos[name] = p / np.linalg.norm(p)
    return pos


_POSITIONS = _build_positions()

#: Biosemi 64-channel cap ordering (A1..A32, B1..B32).
BIOSEMI64_NAMES = (
    "Fp1", "AF7", "AF3", "F1", "F3", "F5", "F7", "FT7", "FC5", "FC3", "FC1",
    "C1", "C3", "C5", "T7", "TP7", "CP5", "CP3", "CP1", "P1", "P3", "P5",
    "P7", "P9", "PO7", "PO3", "O1", "Iz", "Oz", "POz", "Pz", "CPz",
    "Fpz", "Fp2", "AF8", "AF4", "AFz", "Fz", "F2", "F4", "F6", "F8", "FT8",
    "FC6", "FC4", "FC2", "FCz", "Cz", "C2", "C4", "C6", "T8", "TP8", "CP6",
    "CP4", "CP2", "P2", "P4", "P6", "P8", "P10", "PO8", "PO4", "O2",
)

#: 63-channel easycap-style ordering: drops Fpz/Iz/P9/P10/PO4 from the
#: 64-channel set and adds FT9/FT10/TP9/TP10.
EASYCAP63_NAMES = tuple(
    n for n in (
        "Fp1", "AF7", "AF3", "F1", "F3", "F5", "F7", "FT9", "FT7", "FC5",
        "FC3", "FC1", "C1", "C3", "C5", "T7", "TP9", "TP7", "CP5", "CP3",
        "CP1", "P1", "P3", "P5", "P7", "PO7", "PO3", "O1", "Oz", "POz",
        "Pz", "CPz", "Fp2", "AF8", "AF4", "AFz", "Fz", "F2", "F4", "F6",
        "F8", "FT10", "FT8", "FC6", "FC4", "FC2", "FCz", "Cz", "C2", "C4",
        "C6", "T8", "TP10", "TP8", "CP6", "CP4", "CP2", "P2", "P4", "P6",
        "P8", "PO8", "O2",
    )
)

#: Default frontal set used for high-power artifact detection.
DEFAULT_FRONTAL = ("Fp1", "Fp2", "AF3", "AF4", "Fz")


def _make(names) -> ChannelLayout:
    return ChannelLayout(tuple(names), np.stack([_POSITIONS[n] for n in names]))


def standard_layout(name: str) -> ChannelLayout:
    """Built-in layouts: 'biosemi64' and 'easycap63'."""
    if name == "biosemi64":
        return _make(BIOSEMI64_NAMES)
    if name == "easycap63":
        return _make(EASYCAP63_NAMES)
    raise KeyError(f"unknown layout {name!r} (have: biosemi64, easycap63)")

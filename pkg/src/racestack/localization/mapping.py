"""Landmark map: candidates are promoted once seen ``n_confirm`` times in one colour."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..camera import ClassLabel

PHYSICAL = (ClassLabel.SMALL_BLUE, ClassLabel.SMALL_YELLOW, ClassLabel.SMALL_ORANGE, ClassLabel.BIG_ORANGE)


@dataclass(frozen=True)
class Landmark:
    position: tuple[float, float]
    color: ClassLabel
    observation_count: int = 0


@dataclass(eq=False)
class Candidate:
    sum_xy: np.ndarray
    n: int
    color_counts: dict = field(default_factory=dict)

    @property
    def position(self) -> np.ndarray:
        return self.sum_xy / self.n


@dataclass
class LandmarkMap:
    landmarks: list[Landmark] = field(default_factory=list)
    candidates: list[Candidate] = field(default_factory=list)
    n_confirm: int = 2
    gate_radius: float = 0.5

    def __post_init__(self):
        self._lm_xy = None
        self._counts: list[int] = [lm.observation_count for lm in self.landmarks]

    # positions are frozen once confirmed; counts are kept separately so the
    # Landmark records never need rebuilding
    def confirmed_positions(self) -> np.ndarray:
        if self._lm_xy is None or len(self._lm_xy) != len(self.landmarks):
            self._lm_xy = np.array([lm.position for lm in self.landmarks], dtype=float).reshape(-1, 2)
        return self._lm_xy

    def confirmed_colors(self) -> list[ClassLabel]:
        return [lm.color for lm in self.landmarks]

    def count(self, i: int) -> int:
        return self._counts[i]

    def snapshot(self) -> list[Landmark]:
        return [Landmark(lm.position, lm.color, c) for lm, c in zip(self.landmarks, self._counts)]

    def copy(self) -> "LandmarkMap":
        new = LandmarkMap(list(self.snapshot()), copy.deepcopy(self.candidates), self.n_confirm, self.gate_radius)
        return new

    def observe_landmark(self, i: int) -> None:
        self._counts[i] += 1

    def update(self, observations: Iterable[tuple[Sequence[float], ClassLabel]],
               skip_near_confirmed: bool = True) -> list[int]:
        """Fold world-frame observations into the map; returns indices of newly confirmed landmarks."""
        new = []
        r2 = self.gate_radius**2
        for pos, label in observations:
            p = np.asarray(pos, dtype=float)
            lm = self.confirmed_positions()
            if skip_near_confirmed and len(lm):
                d2 = np.sum((lm - p) ** 2, axis=1)
                j = int(np.argmin(d2))
                if d2[j] < r2:
                    self._counts[j] += 1
                    continue
            best = None
            if self.candidates:
                cxy = np.array([c.sum_xy / c.n for c in self.candidates])
                d2 = np.sum((cxy - p) ** 2, axis=1)
                j = int(np.argmin(d2))
                if d2[j] < r2:
                    best = self.candidates[j]
            if best is None:
                best = Candidate(np.zeros(2), 0, {})
                self.candidates.append(best)
            best.sum_xy = best.sum_xy + p
            best.n += 1
            if label in PHYSICAL:
                best.color_counts[label] = best.color_counts.get(label, 0) + 1
                if best.color_counts[label] >= self.n_confirm:
                    self.candidates.remove(best)
                    xy = best.position
                    self.landmarks.append(Landmark((float(xy[0]), float(xy[1])), label, best.n))
                    self._counts.append(best.n)
                    self._lm_xy = None
                    new.append(len(self.landmarks) - 1)
        return new

    def to_json(self) -> list[dict]:
        return [
            {"x": lm.position[0], "y": lm.position[1], "color": lm.color.value, "count": c}
            for lm, c in zip(self.landmarks, self._counts)
        ]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, items: list[dict], **kw) -> "LandmarkMap":
        lms = [Landmark((float(d["x"]), float(d["y"])), ClassLabel(d["color"]), int(d.get("count", 0))) for d in items]
        return cls(lms, **kw)

    @classmethod
    def from_cones(cls, cones: Iterable[tuple[Sequence[float], ClassLabel]], count: int = 2, **kw) -> "LandmarkMap":
        return cls([Landmark((float(p[0]), float(p[1])), c, count) for p, c in cones], **kw)


def update_map(lmap: LandmarkMap, observations) -> LandmarkMap:
    """Functional form of :meth:`LandmarkMap.update`; the input map is left untouched."""
    new = lmap.copy()
    new.update(observations)
    return new

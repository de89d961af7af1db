"""Image-plane validation of lidar landmark proposals.

Ground positions are mapped to pixels with a bivariate polynomial, a bounding
box is sized by the reciprocal-distance law, recentred on the colour blob and
classified by a pluggable classifier (a colour-histogram rule by default).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence

import numpy as np
from matplotlib.colors import rgb_to_hsv
from matplotlib.path import Path as MplPath


class ClassLabel(str, enum.Enum):
    SMALL_BLUE = "blue"
    SMALL_YELLOW = "yellow"
    SMALL_ORANGE = "orange"
    BIG_ORANGE = "big_orange"
    NONE = "none"
    # not seen by any camera: kept for mapping, colourless
    UNKNOWN = "unknown"

    @property
    def is_cone(self) -> bool:
        return self not in (ClassLabel.NONE, ClassLabel.UNKNOWN)


class RankDeficientError(ValueError):
    """The calibration pairs do not determine all polynomial coefficients."""


class TooCloseError(ValueError):
    pass


@dataclass
class CameraModel:
    degree: int
    coeffs: np.ndarray  # (N+1, N+1, 2); coeffs[i, j] multiplies x^i y^j
    s_u: float
    s_v: float
    image_size: tuple[int, int]  # (width, height)
    fov_polygon: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    name: str = "cam"

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        n = self.degree + 1
        if self.coeffs.shape != (n, n, 2):
            raise ValueError(f"coeffs must have shape {(n, n, 2)}, got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("camera coefficients must be finite")
        if self.s_u <= 0 or self.s_v <= 0:
            raise ValueError("scale factors s_u, s_v must be positive")
        self.fov_polygon = np.asarray(self.fov_polygon, dtype=float).reshape(-1, 2)
        self._path = MplPath(self.fov_polygon) if len(self.fov_polygon) >= 3 else None

    def sees(self, p) -> bool:
        if self._path is None:
            return True
        return bool(self._path.contains_point((float(p[0]), float(p[1]))))

    def evaluate(self, p) -> np.ndarray:
        """Polynomial value at ground point(s) ``p`` (no FOV check)."""
        p = np.asarray(p, dtype=float)
        feats = _features(p[..., 0], p[..., 1], self.degree)
        return feats @ self.coeffs.reshape(-1, 2)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "degree": self.degree,
            "coeffs": self.coeffs.reshape(-1, 2).tolist(),
            "s_u": self.s_u,
            "s_v": self.s_v,
            "image_size": list(self.image_size),
            "fov_polygon": self.fov_polygon.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CameraModel":
        n = int(d["degree"]) + 1
        return cls(
            degree=int(d["degree"]),
            coeffs=np.asarray(d["coeffs"], dtype=float).reshape(n, n, 2),
            s_u=float(d["s_u"]),
            s_v=float(d["s_v"]),
            image_size=tuple(int(v) for v in d["image_size"]),
            fov_polygon=np.asarray(d.get("fov_polygon", []), dtype=float),
            name=d.get("name", "cam"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "CameraModel":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class BoundingBox:
    u: float
    v: float
    w: float
    h: float
    low_confidence: bool = False

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("bounding box extents must be positive")

    def window(self, scale: float = 2.0) -> tuple[float, float, float, float]:
        """(u0, v0, u1, v1) of a window ``scale`` times the box extents."""
        hw, hh = 0.5 * scale * self.w, 0.5 * scale * self.h
        return self.u - hw, self.v - hh, self.u + hw, self.v + hh


@dataclass
class SyntheticImage:
    pixels: np.ndarray  # (height, width, 3) uint8
    timestamp: float = 0.0

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or min(self.pixels.shape[:2]) <= 0:
            raise ValueError("image must be a non-empty (h, w, 3) grid")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def blank(cls, width: int, height: int, rgb=(110, 110, 110), timestamp: float = 0.0):
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:] = rgb
        return cls(px, timestamp)

    def crop(self, u0, v0, u1, v1):
        """Pixels inside the window (clipped) and the integer offsets of the crop."""
        c0 = max(int(math.floor(u0)), 0)
        r0 = max(int(math.floor(v0)), 0)
        c1 = min(int(math.ceil(u1)), self.width)
        r1 = min(int(math.ceil(v1)), self.height)
        if c1 <= c0 or r1 <= r0:
            return self.pixels[0:0, 0:0], c0, r0
        return self.pixels[r0:r1, c0:c1], c0, r0


@dataclass(frozen=True)
class ColorMasks:
    """Hue bands (matplotlib HSV, hue in [0, 1)) for the cone colours."""

    blue: tuple[float, float] = (0.55, 0.72)
    yellow: tuple[float, float] = (0.11, 0.20)
    orange: tuple[float, float] = (0.0, 0.10)
    s_min: float = 0.45
    v_min: float = 0.35

    def masks(self, crop: np.ndarray) -> dict[str, np.ndarray]:
        if crop.size == 0:
            empty = np.zeros(crop.shape[:2], bool)
            return {"blue": empty, "yellow": empty, "orange": empty}
        hsv = rgb_to_hsv(crop.astype(float) / 255.0)
        h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
        vivid = (s >= self.s_min) & (v >= self.v_min)
        return {
            name: vivid & (h >= lo) & (h <= hi)
            for name, (lo, hi) in (("blue", self.blue), ("yellow", self.yellow), ("orange", self.orange))
        }


class FitResult(NamedTuple):
    coeffs: np.ndarray
    rms: float


def _features(x, y, degree: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    cols = [x**i * y**j for i in range(degree + 1) for j in range(degree + 1)]
    return np.stack(cols, axis=-1)


def n_terms(degree: int) -> int:
    return (degree + 1) ** 2


def fit_projection(ground, pixels, degree: int = 3) -> FitResult:
    """Least-squares fit of the ground-to-pixel polynomial.

    Args:
        ground: (n, 2) ground-plane positions in the vehicle frame [m].
        pixels: (n, 2) matching pixel coordinates (u, v).
        degree: polynomial degree N; (N+1)^2 coefficient pairs are fitted.

    Returns:
        ``FitResult(coeffs, rms)`` with coeffs shaped (N+1, N+1, 2) and the
        RMS residual over all pixel coordinates.
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    ground = np.asarray(ground, dtype=float).reshape(-1, 2)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(ground) != len(pixels):
        raise ValueError("ground and pixel arrays differ in length")
    need = n_terms(degree)
    if len(ground) < need:
        raise RankDeficientError(
            f"degree {degree} needs at least {need} calibration pairs, got {len(ground)}"
        )
    # column scaling keeps the monomial basis well conditioned
    sx = max(float(np.max(np.abs(ground[:, 0]))), 1e-12)
    sy = max(float(np.max(np.abs(ground[:, 1]))), 1e-12)
    A = _features(ground[:, 0] / sx, ground[:, 1] / sy, degree)
    sv = np.linalg.svd(A, compute_uv=False)
    tol = sv[0] * max(A.shape) * 1e-12
    rank = int(np.sum(sv > tol))
    if rank < need:
        raise RankDeficientError(
            f"calibration design matrix has rank {rank} but degree {degree} has {need} terms; "
            "the ground points do not span the polynomial basis (collinear or repeated points?)"
        )
    c, *_ = np.linalg.lstsq(A, pixels, rcond=None)
    scale = np.array([sx**i * sy**j for i in range(degree + 1) for j in range(degree + 1)])
    coeffs = (c / scale[:, None]).reshape(degree + 1, degree + 1, 2)
    resid = A @ c - pixels
    return FitResult(coeffs, float(np.sqrt(np.mean(resid**2))))


def project_landmark(model: CameraModel, p) -> tuple[float, float] | None:
    """Pixel centre of a ground landmark, or ``None`` when outside the camera's FOV."""
    if not model.sees(p):
        return None
    uv = model.evaluate(p)
    return float(uv[0]), float(uv[1])


def regress_bbox(model: CameraModel, p) -> BoundingBox:
    """Box centred on the projection with extents s/||p|| (rear-axle distance)."""
    dist = math.hypot(float(p[0]), float(p[1]))
    if dist < 0.5:
        raise TooCloseError(f"landmark {dist:.2f} m from the origin is too close to size")
    u, v = model.evaluate(p)
    return BoundingBox(float(u), float(v), model.s_u / dist, model.s_v / dist)


def correct_bbox(image: SyntheticImage, box: BoundingBox, masks: ColorMasks = ColorMasks(),
                 window_scale: float = 2.0) -> BoundingBox:
    """Shift the box centre onto the centroid of cone-coloured pixels near it."""
    crop, c0, r0 = image.crop(*box.window(window_scale))
    m = masks.masks(crop)
    hit = m["blue"] | m["yellow"] | m["orange"]
    if not hit.any():
        return replace(box, low_confidence=True)
    rows, cols = np.nonzero(hit)
    # pixel (r, c) covers [c, c+1) x [r, r+1); its centre is at +0.5
    u = c0 + cols.mean() + 0.5
    v = r0 + rows.mean() + 0.5
    return replace(box, u=float(u), v=float(v), low_confidence=False)


class Classifier(Protocol):
    def __call__(self, image: SyntheticImage, box: BoundingBox) -> tuple[ClassLabel, float]: ...


@dataclass
class ColorHistogramClassifier:
    """Colour-count rule standing in for a learned classifier.

    The dominant cone colour inside a window around the box wins if it covers
    at least ``min_fill`` of the box area. A window mixing colours (dominant
    share below ``min_purity``) is reported as UNKNOWN. Orange blobs taller
    than ``big_ratio`` times the box height are big cones; a blue or yellow
    blob that tall belongs to a nearer, occluding cone and is also UNKNOWN.
    """

    masks: ColorMasks = field(default_factory=ColorMasks)
    min_fill: float = 0.2
    min_purity: float = 0.85
    big_ratio: float = 1.52
    window_scale: float = 2.0

    def __call__(self, image: SyntheticImage, box: BoundingBox) -> tuple[ClassLabel, float]:
        if box.w < 1.0 or box.h < 1.0:
            return ClassLabel.NONE, 0.0
        crop, _, _ = image.crop(*box.window(self.window_scale))
        if crop.size == 0:
            return ClassLabel.NONE, 0.0
        m = self.masks.masks(crop)
        counts = {k: int(v.sum()) for k, v in m.items()}
        color = max(counts, key=counts.get)
        fill = counts[color] / (box.w * box.h)
        if fill < self.min_fill:
            return ClassLabel.NONE, float(min(1.0, 1.0 - fill / self.min_fill))
        total = sum(counts.values())
        purity = counts[color] / total
        conf = float(min(1.0, fill) * purity)
        if purity < self.min_purity:
            return ClassLabel.UNKNOWN, conf
        rows = np.flatnonzero(m[color].any(axis=1))
        tall = rows[-1] - rows[0] + 1 > self.big_ratio * box.h
        if color == "orange":
            return (ClassLabel.BIG_ORANGE if tall else ClassLabel.SMALL_ORANGE), conf
        if tall:
            # only orange cones come in the big size: this blob is a nearer cone
            return ClassLabel.UNKNOWN, conf
        return (ClassLabel.SMALL_BLUE if color == "blue" else ClassLabel.SMALL_YELLOW), conf


def classify_bbox(image: SyntheticImage, box: BoundingBox,
                  classifier: Classifier | None = None) -> tuple[ClassLabel, float]:
    classifier = classifier or ColorHistogramClassifier()
    return classifier(image, box)


def _occluded(boxes: list, dists: np.ndarray) -> np.ndarray:
    """Flags boxes overlapped by the box of a nearer proposal in the same image."""
    n = len(boxes)
    out = np.zeros(n, bool)
    if n < 2:
        return out
    u = np.array([b.u for b in boxes])
    v = np.array([b.v for b in boxes])
    w = np.array([b.w for b in boxes])
    h = np.array([b.h for b in boxes])
    ox = np.abs(u[:, None] - u[None, :]) < 0.5 * (w[:, None] + w[None, :])
    oy = np.abs(v[:, None] - v[None, :]) < 0.5 * (h[:, None] + h[None, :])
    nearer = dists[None, :] < dists[:, None]
    return np.any(ox & oy & nearer, axis=1)


def validate_proposals(proposals: Sequence, models: Sequence[CameraModel],
                       images: Sequence[SyntheticImage], classifier: Classifier | None = None,
                       masks: ColorMasks = ColorMasks()):
    """Label each proposal from every camera that sees it.

    Returns a list of ``(proposal, label)``. Proposals outside every FOV are
    passed through as UNKNOWN; proposals classified as NONE are dropped. A
    proposal whose box is overlapped by a nearer proposal's box is not
    classified from that image (it may be hidden behind the nearer cone).
    """
    if len(models) != len(images):
        raise ValueError("need exactly one image per camera model")
    classifier = classifier or ColorHistogramClassifier(masks=masks)
    best: list = [None] * len(proposals)
    for model, img in zip(models, images):
        idx, boxes = [], []
        for i, prop in enumerate(proposals):
            p = prop.position
            if not model.sees(p):
                continue
            try:
                boxes.append(regress_bbox(model, p))
            except TooCloseError:
                continue
            idx.append(i)
        if not idx:
            continue
        dists = np.array([math.hypot(*proposals[i].position[:2]) for i in idx])
        hidden = _occluded(boxes, dists)
        for i, box, occ in zip(idx, boxes, hidden):
            if occ:
                if best[i] is None:
                    best[i] = (ClassLabel.UNKNOWN, 0.0)
                continue
            box = correct_bbox(img, box, masks)
            label, conf = classifier(img, box)
            if best[i] is None or conf > best[i][1]:
                best[i] = (label, conf)
    out = []
    for prop, b in zip(proposals, best):
        if b is None:
            out.append((prop, ClassLabel.UNKNOWN))
        elif b[0] is not ClassLabel.NONE:
            out.append((prop, b[0]))
    return out

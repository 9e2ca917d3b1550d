"""Orbital-region geometry: landmarks, alignment, masks, crop/embed and compositing.

Images are channel-first float tensors ``(..., 3, H, W)`` with values in [0, 1].
Every spatial helper here acts on the last two dimensions, so the same call
works for single images, batches and bare ``(H, W)`` masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

# schema id -> points per eye; the two eyes are stored back to back
LANDMARK_SCHEMAS = {
    "orbit12": 6,
    "box8": 4,
}
DEFAULT_SCHEMA = "orbit12"


class GeometryError(ValueError):
    pass


class AlignmentError(GeometryError):
    pass


@dataclass
class LandmarkSet:
    """Ordered (x, y) landmark points in image pixel coordinates.

    ``size`` is the canonical ``(H, W)`` frame, required only when the set is
    used as an alignment template.
    """

    points: np.ndarray
    schema_id: str = DEFAULT_SCHEMA
    size: tuple[int, int] | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.schema_id not in LANDMARK_SCHEMAS:
            raise GeometryError(f"unknown landmark schema {self.schema_id!r}")
        expected = 2 * LANDMARK_SCHEMAS[self.schema_id]
        if len(self.points) != expected:
            raise GeometryError(
                f"schema {self.schema_id} expects {expected} points, got {len(self.points)}"
            )

    @property
    def eyes(self) -> tuple[np.ndarray, np.ndarray]:
        n = LANDMARK_SCHEMAS[self.schema_id]
        return self.points[:n], self.points[n:]

    def validate(self, image_shape: tuple[int, int]) -> None:
        h, w = image_shape
        x, y = self.points[:, 0], self.points[:, 1]
        if not (np.all(x >= 0) and np.all(x < w) and np.all(y >= 0) and np.all(y < h)):
            raise GeometryError(f"landmarks fall outside the {h}x{w} image")

    def mirrored(self, width: int) -> "LandmarkSet":
        pts = self.points.copy()
        pts[:, 0] = width - pts[:, 0]
        return LandmarkSet(pts, self.schema_id, self.size)

    def to_json(self) -> dict:
        return {"schema": self.schema_id, "points": self.points.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "LandmarkSet":
        return cls(np.asarray(doc["points"], dtype=np.float64), doc.get("schema", DEFAULT_SCHEMA))


@dataclass(frozen=True)
class BBox:
    top: int
    left: int
    height: int
    width: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def inside(self, image_shape: tuple[int, int]) -> bool:
        h, w = image_shape
        return (
            self.top >= 0 and self.left >= 0 and self.height > 0 and self.width > 0
            and self.top + self.height <= h and self.left + self.width <= w
        )

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.top, self.left, self.height, self.width)


@dataclass
class OrbitalMask:
    """Binary patch mask ``M`` plus the bbox placing it in a full image.

    ``mask`` has shape ``(..., h, w)`` so a batch of masks can share one bbox.
    """

    mask: torch.Tensor
    bbox: BBox
    image_shape: tuple[int, int]

    def __post_init__(self):
        if tuple(self.mask.shape[-2:]) != self.bbox.shape:
            raise GeometryError(f"mask shape {tuple(self.mask.shape[-2:])} != bbox {self.bbox.shape}")
        if not self.bbox.inside(self.image_shape):
            raise GeometryError(f"bbox {self.bbox} exceeds image {self.image_shape}")

    def expanded(self) -> torch.Tensor:
        """Full-image 0/1 mask ``M*``."""
        return embed_patch(self.mask, self.bbox, self.image_shape)

    def to(self, dtype=None) -> "OrbitalMask":
        return OrbitalMask(self.mask.to(dtype=dtype), self.bbox, self.image_shape)


@dataclass
class OrbitalPatch:
    pixels: torch.Tensor
    mask: OrbitalMask
    source_image_id: str | None = field(default=None)

    def __post_init__(self):
        if tuple(self.pixels.shape[-2:]) != self.mask.bbox.shape:
            raise GeometryError("patch pixels do not match mask shape")


# ---------------------------------------------------------------------------
# alignment


def estimate_similarity(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares similarity transform (rotation, uniform scale, shift).

    Solves ``dst ~ s R src + t`` by treating points as complex numbers, where
    the whole rotation-and-scale is one complex coefficient. Returns the 2x3
    forward matrix.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or len(src) < 3:
        raise AlignmentError("need at least 3 corresponding points")
    zs = src[:, 0] + 1j * src[:, 1]
    zd = dst[:, 0] + 1j * dst[:, 1]
    zs_c = zs - zs.mean()
    zd_c = zd - zd.mean()
    denom = np.vdot(zs_c, zs_c).real
    if denom < 1e-12:
        raise AlignmentError("coincident landmark configuration")
    # collinear sets have a degenerate second moment
    cov = np.cov(np.stack([src[:, 0], src[:, 1]]))
    if np.linalg.matrix_rank(cov, tol=1e-9 * max(1.0, np.trace(cov))) < 2:
        raise AlignmentError("collinear landmark configuration")
    a = np.vdot(zs_c, zd_c) / denom
    t = zd.mean() - a * zs.mean()
    return np.array([[a.real, -a.imag, t.real], [a.imag, a.real, t.imag]])


def apply_affine(points: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return points @ matrix[:, :2].T + matrix[:, 2]


def warp_image(image: torch.Tensor, matrix: np.ndarray, out_shape: tuple[int, int]) -> torch.Tensor:
    """Bilinear warp of a ``(C, H, W)`` image by the forward 2x3 ``matrix``."""
    full = np.vstack([matrix, [0.0, 0.0, 1.0]])
    inv = np.linalg.inv(full)
    # x,y are pixel-center coordinates; sample grid in (row, col) order
    rows, cols = np.mgrid[0:out_shape[0], 0:out_shape[1]].astype(np.float64)
    xs = inv[0, 0] * (cols + 0.5) + inv[0, 1] * (rows + 0.5) + inv[0, 2] - 0.5
    ys = inv[1, 0] * (cols + 0.5) + inv[1, 1] * (rows + 0.5) + inv[1, 2] - 0.5
    src = image.detach().cpu().numpy()
    out = np.stack([
        ndimage.map_coordinates(ch, [ys, xs], order=1, mode="nearest", prefilter=False)
        for ch in src
    ])
    return torch.from_numpy(out).to(dtype=image.dtype)


def align_face(
    image: torch.Tensor, landmarks: LandmarkSet, template: LandmarkSet
) -> tuple[torch.Tensor, LandmarkSet]:
    """Warp ``image`` so its landmarks land on ``template`` (similarity fit)."""
    if landmarks.schema_id != template.schema_id:
        raise AlignmentError("landmark and template schemas differ")
    if template.size is None:
        raise AlignmentError("template carries no canonical size")
    matrix = estimate_similarity(landmarks.points, template.points)
    warped = warp_image(image, matrix, template.size)
    moved = LandmarkSet(apply_affine(landmarks.points, matrix), landmarks.schema_id)
    return warped, moved


# ---------------------------------------------------------------------------
# masks


def rasterize_polygon(poly: np.ndarray, shape: tuple[int, int], offset=(0, 0)) -> np.ndarray:
    """Even-odd fill sampled at pixel centers.

    ``offset`` is the ``(top, left)`` of the raster window in image pixels.
    """
    h, w = shape
    ys = np.arange(h, dtype=np.float64)[:, None] + offset[0] + 0.5
    xs = np.arange(w, dtype=np.float64)[None, :] + offset[1] + 0.5
    inside = np.zeros((h, w), dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (y0 > ys) != (y1 > ys)
        x_at = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xs < x_at)
    return inside


def _tight_box(landmarks: LandmarkSet) -> tuple[float, float, float, float]:
    pts = landmarks.points
    return pts[:, 1].min(), pts[:, 0].min(), pts[:, 1].max(), pts[:, 0].max()


def default_margin(landmarks: LandmarkSet, fraction: float = 0.15) -> int:
    left, right = landmarks.eyes
    return int(round(fraction * float(np.linalg.norm(left.mean(0) - right.mean(0)))))


def build_orbital_mask(
    landmarks: LandmarkSet,
    image_shape: tuple[int, int],
    margin: int | None = None,
    bbox: BBox | None = None,
) -> OrbitalMask:
    """Rasterize the union of both eye contours into a patch mask.

    By default the bbox is the tight box around both contours, dilated by
    ``margin`` pixels (15% of the inter-eye distance when None) and clamped
    to the image. Passing ``bbox`` fixes the patch window instead, which is how
    a batch of aligned faces shares one generator input shape.
    """
    landmarks.validate(image_shape)
    h, w = image_shape
    if bbox is None:
        if margin is None:
            margin = default_margin(landmarks)
        y0, x0, y1, x1 = _tight_box(landmarks)
        top = max(int(np.floor(y0)) - margin, 0)
        left = max(int(np.floor(x0)) - margin, 0)
        bottom = min(int(np.ceil(y1)) + margin, h)
        right = min(int(np.ceil(x1)) + margin, w)
        bbox = BBox(top, left, bottom - top, right - left)
    elif not bbox.inside(image_shape):
        raise GeometryError(f"bbox {bbox} exceeds image {image_shape}")
    mask = np.zeros(bbox.shape, dtype=bool)
    for eye in landmarks.eyes:
        mask |= rasterize_polygon(eye, bbox.shape, offset=(bbox.top, bbox.left))
    if not mask.any():
        raise GeometryError("orbital mask is empty (zero-area contours or bbox misses them)")
    return OrbitalMask(torch.from_numpy(mask.astype(np.float64)), bbox, (h, w))


def centered_bbox(center: tuple[float, float], shape: tuple[int, int], image_shape: tuple[int, int]) -> BBox:
    """Fixed-size box centered on ``(row, col)``, shifted to stay inside the image."""
    ph, pw = shape
    h, w = image_shape
    if ph > h or pw > w:
        raise GeometryError(f"patch {shape} larger than image {image_shape}")
    top = int(round(center[0] - ph / 2))
    left = int(round(center[1] - pw / 2))
    top = min(max(top, 0), h - ph)
    left = min(max(left, 0), w - pw)
    return BBox(top, left, ph, pw)


# ---------------------------------------------------------------------------
# patch algebra


def crop_patch(image: torch.Tensor, bbox: BBox) -> torch.Tensor:
    if not bbox.inside(tuple(image.shape[-2:])):
        raise GeometryError(f"bbox {bbox} outside image {tuple(image.shape[-2:])}")
    rows, cols = bbox.slices
    return image[..., rows, cols]


def embed_patch(patch: torch.Tensor, bbox: BBox, canvas_shape: tuple[int, int]) -> torch.Tensor:
    """The zero-canvas operator ``h``: place ``patch`` at ``bbox`` in zeros."""
    if tuple(patch.shape[-2:]) != bbox.shape:
        raise GeometryError(f"patch {tuple(patch.shape[-2:])} does not match bbox {bbox.shape}")
    if not bbox.inside(canvas_shape):
        raise GeometryError(f"bbox {bbox} outside canvas {canvas_shape}")
    h, w = canvas_shape
    pad = (bbox.left, w - bbox.left - bbox.width, bbox.top, h - bbox.top - bbox.height)
    return F.pad(patch, pad)


def composite(source: torch.Tensor, generated: OrbitalPatch) -> torch.Tensor:
    """Paste ``generated`` into ``source`` through its mask.

    Inside the bbox this is ``O_s (1 - M) + O_hat M``; outside the mask the
    source pixels are returned bit for bit.
    """
    mask = generated.mask
    if tuple(source.shape[-2:]) != mask.image_shape:
        raise GeometryError("source image does not match mask image shape")
    full = mask.expanded().to(source.device) > 0.5
    if full.dim() >= 3 and full.dim() == source.dim() - 1:
        full = full.unsqueeze(-3)  # (N, H, W) batch of masks -> broadcast over channels
    pasted = embed_patch(generated.pixels.to(source.dtype), mask.bbox, mask.image_shape)
    return torch.where(full, pasted, source)

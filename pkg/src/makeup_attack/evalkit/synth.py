"""Procedural face renders with orbital landmarks, standing in for LFW-style data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..geometry import LandmarkSet

# canonical frame: eye centers at (x, y) = (32 -/+ 11, 26) in a 64x64 image
CANON_SIZE = (64, 64)
CANON_EYE_Y = 26.0
CANON_HALF_SPACING = 11.0
ORBIT_RX = 8.5
ORBIT_RY = 5.5
# hexagon traced from the outer corner over the upper orbit, back along the lower orbit
ORBIT_ANGLES = np.deg2rad([180.0, 120.0, 60.0, 0.0, -60.0, -120.0])

EYESHADOW_COLORS = np.array([
    [0.45, 0.20, 0.45],
    [0.40, 0.25, 0.15],
    [0.70, 0.35, 0.45],
    [0.25, 0.30, 0.55],
    [0.55, 0.40, 0.25],
    [0.35, 0.15, 0.30],
])


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticFaceSpec:
    n_identities: int = 20
    images_per_identity: int = 10
    size: tuple[int, int] = CANON_SIZE
    illumination: tuple[float, float] = (0.85, 1.15)
    max_rotation_deg: float = 4.0
    max_shift_px: float = 1.5
    pixel_noise: float = 0.01
    eye_spacing: tuple[float, float] = (19.0, 25.0)

    def validate(self):
        if self.n_identities < 2:
            raise SynthError("need at least 2 identities")
        if self.images_per_identity < 1:
            raise SynthError("need at least 1 image per identity")
        lo, hi = self.illumination
        if not 0 < lo <= hi:
            raise SynthError("illumination range must be positive and ordered")
        if self.max_rotation_deg < 0 or self.max_shift_px < 0 or self.pixel_noise < 0:
            raise SynthError("nuisance ranges must be non-negative")
        if not 0 < self.eye_spacing[0] <= self.eye_spacing[1] < self.size[1] - 2 * ORBIT_RX - 4:
            raise SynthError("eye spacing does not fit the image")


@dataclass
class FaceDataset:
    images: torch.Tensor                 # (N, 3, H, W) float32 in [0, 1]
    landmarks: list[LandmarkSet]
    labels: np.ndarray                   # identity index per image
    ids: list[str]
    identity_params: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "FaceDataset":
        idx = [int(i) for i in idx]
        return FaceDataset(
            self.images[idx], [self.landmarks[i] for i in idx], self.labels[idx],
            [self.ids[i] for i in idx], self.identity_params,
        )


def canonical_landmarks(half_spacing: float = CANON_HALF_SPACING, eye_y: float = CANON_EYE_Y,
                        center_x: float = None, size=CANON_SIZE) -> LandmarkSet:
    cx = size[1] / 2 if center_x is None else center_x
    pts = []
    for ex in (cx - half_spacing, cx + half_spacing):
        pts += [(ex + ORBIT_RX * np.cos(a), eye_y - ORBIT_RY * np.sin(a)) for a in ORBIT_ANGLES]
    return LandmarkSet(np.array(pts), "orbit12", size=tuple(size))


def _identity_params(rng: np.random.Generator, spec: SyntheticFaceSpec) -> dict:
    skin = np.array([0.78, 0.60, 0.48]) * rng.uniform(0.8, 1.08) + rng.normal(0, 0.03, 3)
    return {
        "skin": np.clip(skin, 0.2, 0.95),
        "face_axes": (rng.uniform(22, 26), rng.uniform(27, 30)),
        "half_spacing": rng.uniform(*spec.eye_spacing) / 2,
        "eye_dy": rng.uniform(-1.5, 1.5),
        "orbit_tone": rng.uniform(0.15, 0.85, 3),
        "iris": rng.uniform(0.05, 0.9, 3),
        "iris_r": rng.uniform(1.8, 3.0),
        "brow": rng.uniform(0.05, 0.45, 3),
        "brow_thick": rng.uniform(1.2, 2.6),
        "brow_tilt": rng.uniform(-0.15, 0.15),
        "mouth": rng.uniform(0.35, 0.75, 3) * np.array([1.0, 0.55, 0.55]),
        "mouth_w": rng.uniform(6, 11),
        "tex_freq": rng.uniform(0.15, 0.6, (3, 2)),
        "tex_phase": rng.uniform(0, 2 * np.pi, 3),
        "tex_amp": rng.uniform(0.02, 0.05),
    }


def _soft(d, width=0.6):
    """Anti-aliased inside indicator for a signed distance-like field ``d`` (<0 inside)."""
    return np.clip(0.5 - d / width, 0.0, 1.0)


def render_face(p: dict, size=CANON_SIZE, rotation=0.0, shift=(0.0, 0.0), illumination=1.0,
                eyeshadow=None, noise=None, background=(0.4, 0.4, 0.4)):
    """Render one face; returns ``(image (3, H, W), landmarks)``.

    Geometry is evaluated analytically at pixel centers in the face frame, so
    rotation and shift need no resampling.
    """
    h, w = size
    cx, cy = w / 2, h / 2
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = cols + 0.5, rows + 0.5
    c, s = np.cos(rotation), np.sin(rotation)
    # pixel -> face frame (inverse of rotate-about-center then shift)
    dx, dy = px - cx - shift[0], py - cy - shift[1]
    fx = c * dx + s * dy + cx
    fy = -s * dx + c * dy + cy

    img = np.broadcast_to(np.asarray(background, dtype=np.float64)[:, None, None], (3, h, w)).copy()
    img *= (0.9 + 0.1 * (fy / h))[None]

    ax, ay = p["face_axes"]
    face = _soft((np.sqrt(((fx - cx) / ax) ** 2 + ((fy - cy - 2) / ay) ** 2) - 1) * min(ax, ay))
    tex = sum(
        np.sin(p["tex_freq"][k, 0] * fx + p["tex_freq"][k, 1] * fy + p["tex_phase"][k]) for k in range(3)
    ) * p["tex_amp"] / 3
    skin = p["skin"][:, None, None] + tex[None]
    img = img * (1 - face) + skin * face

    eye_y = CANON_EYE_Y + p["eye_dy"]
    hs = p["half_spacing"]
    for side, ex in ((-1, cx - hs), (1, cx + hs)):
        orbit = _soft((np.sqrt(((fx - ex) / ORBIT_RX) ** 2 + ((fy - eye_y) / ORBIT_RY) ** 2) - 1) * ORBIT_RY)
        tone = 0.45 * p["orbit_tone"] + 0.55 * p["skin"]
        img = img * (1 - orbit) + tone[:, None, None] * orbit
        if eyeshadow is not None:
            color, strength = eyeshadow
            lid = orbit * np.clip(1.2 - ((fy - eye_y + 1.5) / ORBIT_RY) ** 2, 0, 1) * strength
            img = img * (1 - lid) + np.asarray(color)[:, None, None] * lid
        white = _soft((np.sqrt(((fx - ex) / 5.0) ** 2 + ((fy - eye_y) / 2.6) ** 2) - 1) * 2.6)
        img = img * (1 - white) + np.array([0.92, 0.92, 0.9])[:, None, None] * white
        r = np.sqrt((fx - ex) ** 2 + (fy - eye_y) ** 2)
        iris = _soft(r - p["iris_r"]) * white
        img = img * (1 - iris) + p["iris"][:, None, None] * iris
        pupil = _soft(r - 0.8) * white
        img = img * (1 - pupil) + 0.05 * pupil
        by = eye_y - ORBIT_RY - 2.5 + side * p["brow_tilt"] * (fx - ex)
        brow = _soft(np.abs(fy - by) - p["brow_thick"] / 2) * _soft(np.abs(fx - ex) - 7.5)
        img = img * (1 - brow[None]) + p["brow"][:, None, None] * brow[None]

    mouth = _soft((np.sqrt(((fx - cx) / p["mouth_w"]) ** 2 + ((fy - 47) / 1.8) ** 2) - 1) * 1.8)
    img = img * (1 - mouth) + p["mouth"][:, None, None] * mouth

    img = img * illumination
    if noise is not None:
        img = img + noise
    img = np.clip(img, 0.0, 1.0)

    lm = canonical_landmarks(hs, eye_y, cx, size).points
    ldx, ldy = lm[:, 0] - cx, lm[:, 1] - cy
    lm = np.stack([c * ldx - s * ldy + cx + shift[0], s * ldx + c * ldy + cy + shift[1]], axis=1)
    return img, LandmarkSet(lm, "orbit12")


def synth_dataset(spec: SyntheticFaceSpec = SyntheticFaceSpec(), seed: int = 0,
                  makeup: bool = False, id_prefix: str = "id") -> FaceDataset:
    """Deterministic procedural dataset; ``makeup=True`` adds eye shadow to every face."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params = [_identity_params(rng, spec) for _ in range(spec.n_identities)]
    images, lms, labels, ids = [], [], [], []
    for i, p in enumerate(params):
        for j in range(spec.images_per_identity):
            rot = np.deg2rad(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
            shift = tuple(rng.uniform(-spec.max_shift_px, spec.max_shift_px, 2))
            illum = rng.uniform(*spec.illumination)
            background = rng.uniform(0.25, 0.6, 3)
            noise = rng.normal(0, spec.pixel_noise, (3, *spec.size)) if spec.pixel_noise else None
            shadow = None
            if makeup:
                shadow = (EYESHADOW_COLORS[rng.integers(len(EYESHADOW_COLORS))], rng.uniform(0.4, 0.75))
            img, lm = render_face(p, spec.size, rot, shift, illum, shadow, noise, background)
            images.append(img)
            lms.append(lm)
            labels.append(i)
            ids.append(f"{id_prefix}{i:03d}_{j:02d}")
    tensor = torch.from_numpy(np.stack(images).astype(np.float32))
    return FaceDataset(tensor, lms, np.array(labels), ids, params)

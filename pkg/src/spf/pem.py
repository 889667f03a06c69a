"""Patch extraction: landmark-guided skin regions that avoid facial features.

All geometry runs in continuous pixel coordinates where pixel (row r, col c)
covers the unit square [c, c+1] x [r, r+1] and has its center at
(c + 0.5, r + 0.5). Points are (x, y) pairs, x along columns.

The pipeline is: align the face to a canonical frame (horizontal eye line,
fixed inter-ocular distance), build exclusion discs around the six landmarks,
place the three candidate skin regions (left cheek, right cheek, chin),
jitter them, and crop. Everything is a pure function of (image, keypoints,
seed, config); a face whose regions cannot be placed is rejected rather than
relaxing the exclusion zones.
"""

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import weights
from .errors import GeometryError, RegionInfeasibleError, ShapeError

log = logging.getLogger("spf.pem")

KEYPOINT_NAMES = ("left_eye_outer", "right_eye_outer", "nose_tip",
                  "mouth_left", "mouth_right", "chin_bottom")

LEFT_CHEEK = "left_cheek"
RIGHT_CHEEK = "right_cheek"
CHIN = "chin"
REGION_IDS = (LEFT_CHEEK, RIGHT_CHEEK, CHIN)


@dataclass(frozen=True)
class Keypoints:
    """Six named 2-D landmarks in pixel coordinates of their image."""

    left_eye_outer: np.ndarray
    right_eye_outer: np.ndarray
    nose_tip: np.ndarray
    mouth_left: np.ndarray
    mouth_right: np.ndarray
    chin_bottom: np.ndarray

    def __post_init__(self):
        for name in KEYPOINT_NAMES:
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=np.float64))

    def points(self):
        return [getattr(self, name) for name in KEYPOINT_NAMES]

    @property
    def inter_ocular(self):
        return float(np.linalg.norm(self.right_eye_outer - self.left_eye_outer))

    def to_dict(self):
        return {name: [float(v) for v in getattr(self, name)]
                for name in KEYPOINT_NAMES}

    @classmethod
    def from_dict(cls, d):
        missing = [n for n in KEYPOINT_NAMES if n not in d]
        if missing:
            raise GeometryError(f"keypoint file is missing {missing}")
        return cls(**{n: np.asarray(d[n], dtype=np.float64) for n in KEYPOINT_NAMES})


@dataclass(frozen=True)
class FaceRecord:
    image: np.ndarray            # (1,3,H,W) float32 in [0,1]
    keypoints: Keypoints
    source_id: str = ""


@dataclass(frozen=True)
class PatchRegion:
    center: np.ndarray           # (x, y)
    half_extent: float
    region_id: str
    jitter_offset: tuple = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    def bounds(self):
        """(x0, y0, x1, y1) of the axis-aligned square."""
        cx, cy = self.center
        h = self.half_extent
        return cx - h, cy - h, cx + h, cy + h


@dataclass(frozen=True)
class PatchSet:
    patches: list                # k arrays of shape (1,3,S,S)
    regions: list                # k PatchRegion
    seed: int

    @property
    def k(self):
        return len(self.patches)

    @property
    def patch_size(self):
        return self.patches[0].shape[-1]


@dataclass(frozen=True)
class PemConfig:
    """Canonical frame and the region-construction constants, all config-exposed."""

    canvas_h: int = 352
    canvas_w: int = 224
    eye_center: tuple = (112.0, 80.0)     # (x, y) midpoint of the outer eye corners
    target_iod: float = 96.0
    zone_fracs: dict = field(default_factory=lambda: {
        "left_eye_outer": 0.35, "right_eye_outer": 0.35, "nose_tip": 0.30,
        "mouth_left": 0.30, "mouth_right": 0.30, "chin_bottom": 0.20,
    })
    cheek_out_frac: float = 0.25          # outward displacement of cheek centers
    chin_toward_frac: float = 0.60        # mouth-midpoint -> chin_bottom fraction
    half_extent_frac: float = 0.22
    jitter_frac: float = 0.08
    jitter_attempts: int = 32
    patch_size: int = 64


# ------------------------------------------------------------------ sampling

def bilinear_sample(image, xs, ys):
    """Sample (1,3,H,W) at continuous (x,y) grids with clamp-to-edge."""
    _, c, h, w = image.shape
    fx = np.clip(xs - 0.5, 0, w - 1)
    fy = np.clip(ys - 0.5, 0, h - 1)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (fx - x0).astype(np.float32)
    ay = (fy - y0).astype(np.float32)
    img = image[0]
    out = ((1 - ay) * ((1 - ax) * img[:, y0, x0] + ax * img[:, y0, x1])
           + ay * ((1 - ax) * img[:, y1, x0] + ax * img[:, y1, x1]))
    return out[None, ...]


# ----------------------------------------------------------------- alignment

def alignment_transform(kp, cfg):
    """Similarity (scale, rotation, translation) to the canonical frame."""
    iod = kp.inter_ocular
    if iod <= 1e-9:
        raise GeometryError("degenerate keypoints: inter-ocular distance is zero")
    d = kp.right_eye_outer - kp.left_eye_outer
    theta = np.arctan2(d[1], d[0])
    s = cfg.target_iod / iod
    cos_t, sin_t = np.cos(-theta), np.sin(-theta)
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    mid = (kp.left_eye_outer + kp.right_eye_outer) / 2
    target = np.asarray(cfg.eye_center, dtype=np.float64)

    def fwd(p):
        return s * (rot @ (np.asarray(p, dtype=np.float64) - mid)) + target

    inv_rot = rot.T

    def inv(p):
        return inv_rot @ ((np.asarray(p, dtype=np.float64) - target) / s) + mid

    return fwd, inv


def align(record, cfg=PemConfig()):
    """Rotate/scale/translate the face so the eye line is horizontal and the
    inter-ocular distance equals cfg.target_iod, resampling bilinearly onto
    the canonical canvas."""
    fwd, _ = alignment_transform(record.keypoints, cfg)
    h, w = cfg.canvas_h, cfg.canvas_w

    ys, xs = np.mgrid[0:h, 0:w]
    out_pts = np.stack([xs + 0.5, ys + 0.5])          # continuous centers
    # inverse map, vectorised: inv(p) = R^T (p - t)/s + mid
    d = record.keypoints.right_eye_outer - record.keypoints.left_eye_outer
    theta = np.arctan2(d[1], d[0])
    s = cfg.target_iod / record.keypoints.inter_ocular
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    mid = (record.keypoints.left_eye_outer + record.keypoints.right_eye_outer) / 2
    tx, ty = cfg.eye_center
    px = (out_pts[0] - tx) / s
    py = (out_pts[1] - ty) / s
    src_x = cos_t * px - sin_t * py + mid[0]
    src_y = sin_t * px + cos_t * py + mid[1]
    image = bilinear_sample(record.image, src_x, src_y).astype(np.float32)

    new_kp = Keypoints(**{name: fwd(getattr(record.keypoints, name))
                          for name in KEYPOINT_NAMES})
    for name, p in zip(KEYPOINT_NAMES, new_kp.points()):
        if not (0 <= p[0] <= w and 0 <= p[1] <= h):
            raise GeometryError(f"aligned keypoint {name} at {tuple(p)} falls "
                                f"outside the {h}x{w} canvas")
    return FaceRecord(image=image, keypoints=new_kp, source_id=record.source_id)


# ------------------------------------------------------------------ geometry

def exclusion_zones(kp, cfg=PemConfig()):
    """One disc per landmark; radii are fractions of the inter-ocular distance."""
    iod = kp.inter_ocular
    return [(getattr(kp, name).copy(), cfg.zone_fracs[name] * iod)
            for name in KEYPOINT_NAMES]


def _point_square_distance(p, bounds):
    x0, y0, x1, y1 = bounds
    dx = max(x0 - p[0], 0.0, p[0] - x1)
    dy = max(y0 - p[1], 0.0, p[1] - y1)
    return float(np.hypot(dx, dy))


def region_violation(region, zones, image_hw):
    """Reason the region is invalid, or None if it satisfies all invariants."""
    h, w = image_hw
    x0, y0, x1, y1 = region.bounds()
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        return f"square ({x0:.1f},{y0:.1f})-({x1:.1f},{y1:.1f}) exceeds {h}x{w} bounds"
    for center, radius in zones:
        if _point_square_distance(center, region.bounds()) < radius:
            return f"square intersects exclusion disc at {tuple(np.round(center, 1))}"
    return None


def candidate_regions(kp, cfg=PemConfig(), image_hw=None):
    """The three skin regions; raises RegionInfeasibleError if any is invalid."""
    if image_hw is None:
        image_hw = (cfg.canvas_h, cfg.canvas_w)
    iod = kp.inter_ocular
    half = cfg.half_extent_frac * iod
    zones = exclusion_zones(kp, cfg)

    def cheek(eye, mouth):
        mid = (eye + mouth) / 2
        away = mid - kp.nose_tip
        norm = np.linalg.norm(away)
        if norm <= 1e-9:
            raise GeometryError("cheek midpoint coincides with the nose tip")
        return mid + cfg.cheek_out_frac * iod * (away / norm)

    mouth_mid = (kp.mouth_left + kp.mouth_right) / 2
    centers = {
        LEFT_CHEEK: cheek(kp.left_eye_outer, kp.mouth_left),
        RIGHT_CHEEK: cheek(kp.right_eye_outer, kp.mouth_right),
        CHIN: mouth_mid + cfg.chin_toward_frac * (kp.chin_bottom - mouth_mid),
    }
    regions = []
    for rid in REGION_IDS:
        region = PatchRegion(center=centers[rid], half_extent=half, region_id=rid)
        reason = region_violation(region, zones, image_hw)
        if reason is not None:
            raise RegionInfeasibleError(rid, reason)
        regions.append(region)
    return regions


def jitter(region, rng, max_shift, zones=(), image_hw=None, attempts=32):
    """Shift the region by a uniform integer offset, rejection-resampled so the
    result always satisfies the region invariants. Falls back to the
    unjittered region after `attempts` failed draws."""
    if image_hw is None:
        image_hw = (10 ** 9, 10 ** 9)
    max_shift = int(max_shift)
    if max_shift <= 0:
        return region
    for _ in range(attempts):
        off = rng.integers(-max_shift, max_shift + 1, size=2)
        moved = replace(region, center=region.center + off,
                        jitter_offset=(int(off[0]), int(off[1])))
        if region_violation(moved, zones, image_hw) is None:
            return moved
    log.warning("jitter gave up after %d attempts for %s; keeping the "
                "unshifted region", attempts, region.region_id)
    return region


def extract(image, region, out_size):
    """Crop the region square and resample it bilinearly to (1,3,S,S)."""
    if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != 3:
        raise ShapeError(f"extract expects a (1,3,H,W) image, got {image.shape}")
    cx, cy = region.center
    he = region.half_extent
    step = 2.0 * he / out_size
    coords = (np.arange(out_size) + 0.5) * step
    xs = cx - he + coords
    ys = cy - he + coords
    grid_x = np.broadcast_to(xs[None, :], (out_size, out_size))
    grid_y = np.broadcast_to(ys[:, None], (out_size, out_size))
    return bilinear_sample(image, grid_x, grid_y).astype(np.float32)


def select_patches(record, k, out_size, seed, cfg=PemConfig()):
    """Pick k distinct regions uniformly without replacement, jitter each and
    crop. The record must already be aligned. Fully deterministic in `seed`."""
    if k not in (1, 2, 3):
        raise GeometryError(f"k must be 1, 2 or 3, got {k}")
    image_hw = record.image.shape[2:]
    regions = candidate_regions(record.keypoints, cfg, image_hw)
    zones = exclusion_zones(record.keypoints, cfg)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(regions), size=k, replace=False)
    max_shift = int(round(cfg.jitter_frac * record.keypoints.inter_ocular))

    patches, provenance = [], []
    for idx in chosen:
        region = jitter(regions[idx], rng, max_shift, zones, image_hw,
                        attempts=cfg.jitter_attempts)
        patches.append(extract(record.image, region, out_size))
        provenance.append(region)
    return PatchSet(patches=patches, regions=provenance, seed=int(seed))


# ----------------------------------------------------------------------- I/O

def read_ppm(path):
    """Binary P6 (maxval 255) to a (1,3,H,W) float32 image in [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()

    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval

    if tokens[0] != b"P6":
        raise ShapeError(f"{path}: not a binary P6 PPM (got {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ShapeError(f"{path}: only maxval 255 is supported, got {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    img = raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0
    return img[None, ...]


def write_ppm(path, image):
    if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != 3:
        raise ShapeError(f"write_ppm expects a (1,3,H,W) image, got {image.shape}")
    _, _, h, w = image.shape
    u8 = np.clip(np.rint(image[0] * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(u8.transpose(1, 2, 0).tobytes())


def load_keypoints(path):
    with open(path, "r", encoding="utf-8") as fh:
        return Keypoints.from_dict(json.load(fh))


def save_keypoints(path, kp):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(kp.to_dict(), fh, indent=2)
        fh.write("\n")


def save_patchset(path, patchset):
    tensors = {f"patch{i}": p.astype(np.float32)
               for i, p in enumerate(patchset.patches)}
    weights.save_tensors(path, tensors)


def load_patches(path):
    """Patch arrays only; provenance lives in the JSON written alongside."""
    return [arr for arr in weights.load_tensors(path).values()]

"""Synthetic corpus generation, manifests, augmentation and batching.

The corpus is a desk-scale stand-in for a licensed spoof dataset: bona-fide
patches are smooth skin-tone fields with fine grain; the three attack
families add the texture signatures real capture chains leave behind
(halftone dot lattices from print, interfering gratings from screens, and
low-passed contrast-compressed recaptures). Every sample stores k=3 patches
so one corpus serves any branch arity.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import pem, weights
from .errors import DataError

log = logging.getLogger("spf.data")

BONA_FIDE = 1
ATTACK = 0

ATTACK_NONE = "none"
PRINT_HALFTONE = "print_halftone"
SCREEN_MOIRE = "screen_moire"
RECAPTURE_BLUR = "recapture_blur"
ATTACK_TYPES = (PRINT_HALFTONE, SCREEN_MOIRE, RECAPTURE_BLUR)

_M64 = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64


def derive_seed(master, index):
    """Independent per-item seed from one master seed."""
    return splitmix64((master & _M64) ^ splitmix64(index + 1))


@dataclass(frozen=True)
class SampleRecord:
    patchset_path: str
    label: int                   # 1 bona fide, 0 attack
    attack_type: str
    seed: int

    def __post_init__(self):
        if (self.label == BONA_FIDE) != (self.attack_type == ATTACK_NONE):
            raise DataError(f"label {self.label} inconsistent with attack_type "
                            f"{self.attack_type!r}")


@dataclass(frozen=True)
class DatasetManifest:
    records: list
    patch_size: int
    generator_digest: str
    root: str = ""

    def class_counts(self):
        bona = sum(1 for r in self.records if r.label == BONA_FIDE)
        return {"bona_fide": bona, "attack": len(self.records) - bona}


# ------------------------------------------------------------- texture bank

def _upsample(field, size):
    """Bilinear upsample a (C, h, w) field to (C, size, size)."""
    c, h, w = field.shape
    xs = (np.arange(size) + 0.5) * (w / size)
    ys = (np.arange(size) + 0.5) * (h / size)
    gx = np.broadcast_to(xs[None, :], (size, size))
    gy = np.broadcast_to(ys[:, None], (size, size))
    return pem.bilinear_sample(field[None].astype(np.float32), gx, gy)[0]


def _skin_base(rng, size):
    tone = np.array([0.78, 0.60, 0.47]) + rng.uniform(-0.05, 0.05, 3)
    coarse = rng.normal(0.0, 1.0, (3, 5, 5))
    lowfreq = _upsample(coarse, size) * 0.04
    grain = rng.normal(0.0, 0.012, (3, size, size))
    return np.clip(tone[:, None, None] + lowfreq + grain, 0.0, 1.0)


def _rot_grid(size, angle):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    u = np.cos(angle) * xs + np.sin(angle) * ys
    v = -np.sin(angle) * xs + np.cos(angle) * ys
    return u, v


def _halftone(base, params):
    period, angle, phase = params
    u, v = _rot_grid(base.shape[-1], angle)
    lattice = np.cos(2 * np.pi * u / period + phase) * np.cos(2 * np.pi * v / period + phase)
    dots = (lattice > 0.3).astype(np.float64)
    return np.clip(base * (1.0 - 0.22 * dots[None]), 0.0, 1.0)


def _moire(base, params):
    p1, p2, a1, rel, ph1, ph2 = params
    size = base.shape[-1]
    u1, _ = _rot_grid(size, a1)
    u2, _ = _rot_grid(size, a1 + rel)
    g = 0.5 * (np.sin(2 * np.pi * u1 / p1 + ph1) + np.sin(2 * np.pi * u2 / p2 + ph2))
    return np.clip(base + 0.09 * g[None], 0.0, 1.0)


def _gaussian_blur(img, sigma):
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()

    def along(a, axis):
        moved = np.moveaxis(a, axis, -1)
        padded = np.pad(moved, [(0, 0)] * (a.ndim - 1) + [(radius, radius)], mode="reflect")
        flat = padded.reshape(-1, padded.shape[-1])
        out = np.empty((flat.shape[0], moved.shape[-1]))
        for i, row in enumerate(flat):
            out[i] = np.convolve(row, k, mode="valid")
        return np.moveaxis(out.reshape(moved.shape), -1, axis)

    return along(along(img, 1), 2)


def _recapture(base, params):
    sigma, gamma, lift = params
    soft = _gaussian_blur(base, sigma)
    return np.clip(0.5 + gamma * (soft - 0.5) + lift, 0.0, 1.0)


def _attack_params(attack_type, rng):
    if attack_type == PRINT_HALFTONE:
        return (rng.uniform(3.0, 6.0), rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi))
    if attack_type == SCREEN_MOIRE:
        return (rng.uniform(4.0, 9.0), rng.uniform(4.0, 9.0), rng.uniform(0, np.pi),
                np.deg2rad(rng.uniform(5.0, 20.0)), rng.uniform(0, 2 * np.pi),
                rng.uniform(0, 2 * np.pi))
    if attack_type == RECAPTURE_BLUR:
        return (rng.uniform(1.0, 2.0), rng.uniform(0.6, 0.8), rng.uniform(-0.03, 0.03))
    return ()


_OVERLAYS = {PRINT_HALFTONE: _halftone, SCREEN_MOIRE: _moire, RECAPTURE_BLUR: _recapture}


def render_patches(attack_type, size, seed, k=3):
    """k patches for one sample; attack parameters are shared across the
    sample (same print, same screen) while grain and phases vary."""
    rng = np.random.default_rng(seed)
    params = _attack_params(attack_type, rng)
    out = []
    for _ in range(k):
        patch = _skin_base(rng, size)
        if attack_type != ATTACK_NONE:
            patch = _OVERLAYS[attack_type](patch, params)
        out.append(patch.astype(np.float32)[None])
    return out


# ------------------------------------------------------------------- corpus

def generator_digest(patch_size, seed, n_per_class):
    cfg = {"version": 1, "patch_size": patch_size, "seed": seed,
           "n_per_class": n_per_class, "attacks": list(ATTACK_TYPES)}
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def synth_generate(out_dir, n_per_class, patch_size, seed):
    """Write n_per_class bona-fide + n_per_class-per-attack-type samples."""
    if n_per_class < 1:
        raise DataError(f"n_per_class must be >= 1, got {n_per_class}")
    patches_dir = os.path.join(out_dir, "patches")
    try:
        os.makedirs(patches_dir, exist_ok=True)
    except OSError as exc:
        raise IOError(f"cannot create output directory {patches_dir}: {exc}") from exc

    classes = [ATTACK_NONE] + list(ATTACK_TYPES)
    records = []
    for idx in range(n_per_class * len(classes)):
        attack_type = classes[idx // n_per_class]
        label = BONA_FIDE if attack_type == ATTACK_NONE else ATTACK
        sample_seed = derive_seed(seed, idx)
        patches = render_patches(attack_type, patch_size, sample_seed)
        rel = os.path.join("patches", f"sample_{idx:05d}.w32")
        weights.save_tensors(os.path.join(out_dir, rel),
                             {f"patch{i}": p for i, p in enumerate(patches)})
        records.append(SampleRecord(patchset_path=rel, label=label,
                                    attack_type=attack_type, seed=sample_seed))

    digest = generator_digest(patch_size, seed, n_per_class)
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"patchset": r.patchset_path, "label": r.label,
                                 "attack_type": r.attack_type, "seed": r.seed}) + "\n")
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump({"patch_size": patch_size, "generator_digest": digest}, fh, indent=2)
        fh.write("\n")
    log.info("wrote %d samples to %s", len(records), out_dir)
    return DatasetManifest(records=records, patch_size=patch_size,
                           generator_digest=digest, root=out_dir)


def load_manifest(root):
    meta_path = os.path.join(root, "meta.json")
    manifest_path = os.path.join(root, "manifest.jsonl")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.jsonl under {root}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    records = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            records.append(SampleRecord(patchset_path=d["patchset"], label=d["label"],
                                        attack_type=d["attack_type"], seed=d["seed"]))
    for r in records:
        if not os.path.exists(os.path.join(root, r.patchset_path)):
            raise DataError(f"manifest references missing patch file {r.patchset_path}")
    return DatasetManifest(records=records, patch_size=meta["patch_size"],
                           generator_digest=meta["generator_digest"], root=root)


class PatchDataset:
    """In-memory view of a manifest: patches (n, 3, 3, S, S) and labels (n,)."""

    def __init__(self, patches, labels, attack_types, patch_size):
        self.patches = patches
        self.labels = labels
        self.attack_types = attack_types
        self.patch_size = patch_size

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_manifest(cls, manifest):
        if not manifest.records:
            raise DataError("manifest has no records")
        n = len(manifest.records)
        s = manifest.patch_size
        patches = np.empty((n, 3, 3, s, s), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        kinds = []
        for i, rec in enumerate(manifest.records):
            path = os.path.join(manifest.root, rec.patchset_path)
            try:
                loaded = weights.load_tensors(path)
            except FileNotFoundError as exc:
                raise IOError(f"record {i}: missing patch file {rec.patchset_path}") from exc
            for j, arr in enumerate(loaded.values()):
                patches[i, j] = arr[0]
            labels[i] = rec.label
            kinds.append(rec.attack_type)
        return cls(patches, labels, kinds, s)

    def subset(self, indices):
        return PatchDataset(self.patches[indices], self.labels[indices],
                            [self.attack_types[i] for i in indices], self.patch_size)


def split_dataset(dataset, val_fraction, seed):
    """Deterministic shuffled split into (train, held_out)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_val = max(1, int(round(val_fraction * len(dataset))))
    return dataset.subset(order[n_val:]), dataset.subset(order[:n_val])


def iterate_batches(n_samples, batch_size, rng):
    """Epoch-shuffled index batches; the final partial batch is kept."""
    order = rng.permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        yield order[start:start + batch_size]


# -------------------------------------------------------------- augmentation

def augment(patch, rng):
    """Random horizontal flip plus per-channel brightness/contrast jitter,
    clamped back to [0,1]."""
    out = patch
    if rng.random() < 0.5:
        out = out[..., ::-1]
    a = rng.uniform(0.8, 1.2, size=3).astype(np.float32)
    b = rng.uniform(-0.1, 0.1, size=3).astype(np.float32)
    out = a[None, :, None, None] * out + b[None, :, None, None]
    return np.clip(out, 0.0, 1.0)


def augment_batch(batch, rng):
    """batch is (N, 3, S, S); each sample augmented independently."""
    out = np.empty_like(batch)
    for i in range(batch.shape[0]):
        out[i] = augment(batch[i:i + 1], rng)[0]
    return out


# ---------------------------------------------------------- synthetic faces

# Canonical-frame face proportions, as fractions of the inter-ocular distance.
# The box is the feasibility region of the default patch geometry: outside it
# the candidate regions collide with exclusion zones and the face is rejected.
_PROPORTIONS = {
    "nose_drop": (0.48, 0.56),
    "mouth_drop": (1.28, 1.42),
    "mouth_half_width": (0.20, 0.26),
    "chin_drop_extra": (1.15, 1.35),
}
_KP_NOISE = 1.5


def sample_canonical_keypoints(rng, cfg=None):
    """Random valid keypoints in the canonical aligned frame."""
    cfg = cfg or pem.PemConfig()
    cx, ey = cfg.eye_center
    iod = cfg.target_iod

    def u(key):
        lo, hi = _PROPORTIONS[key]
        return rng.uniform(lo, hi)

    a, b = u("nose_drop"), u("mouth_drop")
    m, extra = u("mouth_half_width"), u("chin_drop_extra")
    pts = {
        "left_eye_outer": (cx - iod / 2, ey),
        "right_eye_outer": (cx + iod / 2, ey),
        "nose_tip": (cx, ey + a * iod),
        "mouth_left": (cx - m * iod, ey + b * iod),
        "mouth_right": (cx + m * iod, ey + b * iod),
        "chin_bottom": (cx, ey + (b + extra) * iod),
    }
    noisy = {k: np.asarray(v) + rng.uniform(-_KP_NOISE, _KP_NOISE, 2)
             for k, v in pts.items()}
    return pem.Keypoints(**noisy)


def _draw_disc(img, center, radius, color, strength=1.0):
    c, h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    d2 = (xs + 0.5 - center[0]) ** 2 + (ys + 0.5 - center[1]) ** 2
    mask = np.clip((radius ** 2 - d2) / (radius ** 2 * 0.3), 0, 1) * strength
    for ch in range(c):
        img[ch] = img[ch] * (1 - mask) + color[ch] * mask


def synthetic_face(seed, cfg=None, canvas=480, posed=True):
    """Render a face-like image with its keypoints, optionally under a random
    similarity pose so alignment has real work to do."""
    cfg = cfg or pem.PemConfig()
    rng = np.random.default_rng(seed)
    kp0 = sample_canonical_keypoints(rng, cfg)

    if posed:
        angle = np.deg2rad(rng.uniform(-12.0, 12.0))
        scale = rng.uniform(0.85, 1.2)
    else:
        angle, scale = 0.0, 1.0
    rot = np.array([[np.cos(angle), -np.sin(angle)],
                    [np.sin(angle), np.cos(angle)]])
    pivot = np.asarray(cfg.eye_center)
    raw = {name: scale * (rot @ (getattr(kp0, name) - pivot))
           for name in pem.KEYPOINT_NAMES}
    # translate so everything fits the canvas with a margin
    allpts = np.stack(list(raw.values()))
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    margin = 24.0
    shift = np.array([margin, margin]) - lo
    room = canvas - margin - (hi + shift)
    shift += np.array([rng.uniform(0, max(room[0], 1e-9)),
                       rng.uniform(0, max(room[1], 1e-9))])
    kp = pem.Keypoints(**{k: v + shift for k, v in raw.items()})

    img = _skin_base(rng, canvas)
    iod = kp.inter_ocular
    dark = (0.25, 0.18, 0.15)
    for name, frac in (("left_eye_outer", 0.11), ("right_eye_outer", 0.11),
                       ("nose_tip", 0.09), ("chin_bottom", 0.07)):
        _draw_disc(img, getattr(kp, name), frac * iod, dark)
    # mouth as a soft bar between the corners
    for t in np.linspace(0, 1, 9):
        p = (1 - t) * kp.mouth_left + t * kp.mouth_right
        _draw_disc(img, p, 0.06 * iod, (0.45, 0.2, 0.2), strength=0.8)

    return pem.FaceRecord(image=img.astype(np.float32)[None],
                          keypoints=kp, source_id=f"synthetic-{seed}")

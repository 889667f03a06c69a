import json

import numpy as np
import pytest

from spf import data, pem
from spf.errors import GeometryError, RegionInfeasibleError, ShapeError

CFG = pem.PemConfig()


# -------------------------------------------------------- geometry oracles

def square_disc_clear_oracle(bounds, center, radius):
    """Independent check that a square and a disc do not overlap: nearest
    point of the rectangle to the disc center, computed via clamping."""
    x0, y0, x1, y1 = bounds
    nx = min(max(center[0], x0), x1)
    ny = min(max(center[1], y0), y1)
    return (nx - center[0]) ** 2 + (ny - center[1]) ** 2 >= radius ** 2


def square_disc_clear_grid(bounds, center, radius, step=0.1):
    """Dense-sampling version used to cross-validate the clamp formula."""
    x0, y0, x1, y1 = bounds
    xs = np.arange(x0, x1 + step, step)
    ys = np.arange(y0, y1 + step, step)
    gx, gy = np.meshgrid(xs, ys)
    d2 = (gx - center[0]) ** 2 + (gy - center[1]) ** 2
    return bool(d2.min() >= radius ** 2)


def test_clamp_formula_matches_dense_sampling():
    rng = np.random.default_rng(0)
    agree = 0
    for _ in range(300):
        c = rng.uniform(0, 40, 2)
        r = rng.uniform(1, 12)
        b = (10.0, 10.0, 25.0, 25.0)
        fast = square_disc_clear_oracle(b, c, r)
        dense = square_disc_clear_grid(b, c, r)
        # the grid can only miss by < one step; tolerate boundary cases
        if fast == dense:
            agree += 1
        else:
            x0, y0, x1, y1 = b
            nx = min(max(c[0], x0), x1)
            ny = min(max(c[1], y0), y1)
            assert abs(np.hypot(nx - c[0], ny - c[1]) - r) < 0.2
    assert agree >= 290


def region_clear_of_zones(region, zones):
    return all(square_disc_clear_oracle(region.bounds(), c, r) for c, r in zones)


def region_in_bounds(region, hw):
    x0, y0, x1, y1 = region.bounds()
    return x0 >= 0 and y0 >= 0 and x1 <= hw[1] and y1 <= hw[0]


# ----------------------------------------------------------------- fixtures

def canonical_keypoints(seed=0, noise=True):
    rng = np.random.default_rng(seed)
    kp = data.sample_canonical_keypoints(rng, CFG)
    if noise:
        return kp
    cx, ey = CFG.eye_center
    iod = CFG.target_iod
    return pem.Keypoints(
        left_eye_outer=(cx - iod / 2, ey), right_eye_outer=(cx + iod / 2, ey),
        nose_tip=(cx, ey + 0.52 * iod),
        mouth_left=(cx - 0.23 * iod, ey + 1.35 * iod),
        mouth_right=(cx + 0.23 * iod, ey + 1.35 * iod),
        chin_bottom=(cx, ey + (1.35 + 1.25) * iod))


def aligned_face(seed=0):
    """A face rendered directly in the canonical frame: eyes horizontal at the
    configured midpoint, inter-ocular exactly target_iod."""
    rng = np.random.default_rng(seed)
    kp = canonical_keypoints(seed, noise=False)
    img = data._skin_base(rng, max(CFG.canvas_h, CFG.canvas_w))[:, :CFG.canvas_h, :CFG.canvas_w]
    for name in pem.KEYPOINT_NAMES:
        data._draw_disc(img, getattr(kp, name), 0.08 * CFG.target_iod, (0.3, 0.2, 0.2))
    return pem.FaceRecord(image=img.astype(np.float32)[None], keypoints=kp,
                          source_id=f"aligned-{seed}")


# ---------------------------------------------------------------- alignment

def test_align_fixed_point():
    face = aligned_face(1)
    out = pem.align(face, CFG)
    assert np.abs(out.image - face.image).max() <= 1e-4
    for name in pem.KEYPOINT_NAMES:
        assert np.allclose(getattr(out.keypoints, name),
                           getattr(face.keypoints, name), atol=1e-6)


def test_align_recovers_rotated_face():
    face = data.synthetic_face(seed=7, cfg=CFG)   # random pose incl. rotation
    out = pem.align(face, CFG)
    d = out.keypoints.right_eye_outer - out.keypoints.left_eye_outer
    angle = np.degrees(np.arctan2(d[1], d[0]))
    assert abs(angle) < 0.5
    assert abs(out.keypoints.inter_ocular - CFG.target_iod) < 0.1


def test_align_idempotent():
    face = data.synthetic_face(seed=3, cfg=CFG)
    once = pem.align(face, CFG)
    twice = pem.align(once, CFG)
    assert np.abs(twice.image - once.image).max() <= 1e-4


def test_align_degenerate_keypoints():
    kp = canonical_keypoints(0, noise=False)
    bad = pem.Keypoints(**{**kp.to_dict(), "right_eye_outer": kp.to_dict()["left_eye_outer"]})
    face = pem.FaceRecord(image=np.zeros((1, 3, 32, 32), dtype=np.float32), keypoints=bad)
    with pytest.raises(GeometryError):
        pem.align(face, CFG)


# ------------------------------------------------------------------- zones

def test_zone_radius_arithmetic():
    kp = canonical_keypoints(0, noise=False)
    assert abs(kp.inter_ocular - 96.0) < 1e-9
    zones = dict(zip(pem.KEYPOINT_NAMES, pem.exclusion_zones(kp, CFG)))
    assert zones["left_eye_outer"][1] == pytest.approx(33.6)
    assert zones["nose_tip"][1] == pytest.approx(28.8)
    assert zones["mouth_left"][1] == pytest.approx(28.8)
    assert zones["chin_bottom"][1] == pytest.approx(19.2)


def test_zones_scale_linearly():
    kp = canonical_keypoints(2)
    scaled = pem.Keypoints(**{k: np.asarray(v) * 2 for k, v in kp.to_dict().items()})
    z1 = pem.exclusion_zones(kp, CFG)
    z2 = pem.exclusion_zones(scaled, CFG)
    for (c1, r1), (c2, r2) in zip(z1, z2):
        assert np.allclose(c2, 2 * np.asarray(c1))
        assert r2 == pytest.approx(2 * r1)


# ----------------------------------------------------------------- regions

def test_symmetric_face_gives_mirror_symmetric_cheeks():
    kp = canonical_keypoints(0, noise=False)
    regions = {r.region_id: r for r in pem.candidate_regions(kp, CFG)}
    cx = CFG.eye_center[0]
    left, right = regions[pem.LEFT_CHEEK], regions[pem.RIGHT_CHEEK]
    assert abs((cx - left.center[0]) - (right.center[0] - cx)) < 0.5
    assert abs(left.center[1] - right.center[1]) < 0.5


def test_half_extent_arithmetic():
    kp = canonical_keypoints(0, noise=False)
    for r in pem.candidate_regions(kp, CFG):
        assert r.half_extent == pytest.approx(21.12)


def test_region_sweep_clears_zones_and_bounds():
    rng = np.random.default_rng(42)
    hw = (CFG.canvas_h, CFG.canvas_w)
    for _ in range(1000):
        kp = data.sample_canonical_keypoints(rng, CFG)
        zones = pem.exclusion_zones(kp, CFG)
        for region in pem.candidate_regions(kp, CFG):
            assert region_in_bounds(region, hw)
            assert region_clear_of_zones(region, zones)


def test_infeasible_face_rejected_with_region_name():
    kp = canonical_keypoints(0, noise=False)
    d = kp.to_dict()
    # mouth corners far too close to the eye line: cheeks collide with eye discs
    d["mouth_left"][1] = d["left_eye_outer"][1] + 40.0
    d["mouth_right"][1] = d["right_eye_outer"][1] + 40.0
    with pytest.raises(RegionInfeasibleError) as exc:
        pem.candidate_regions(pem.Keypoints.from_dict(d), CFG)
    assert "cheek" in str(exc.value)


# ------------------------------------------------------------------ jitter

def test_jitter_zero_shift_is_identity():
    kp = canonical_keypoints(0, noise=False)
    region = pem.candidate_regions(kp, CFG)[0]
    out = pem.jitter(region, np.random.default_rng(0), max_shift=0)
    assert out is region


def test_jitter_deterministic_under_seed():
    kp = canonical_keypoints(0, noise=False)
    region = pem.candidate_regions(kp, CFG)[0]
    zones = pem.exclusion_zones(kp, CFG)
    a = pem.jitter(region, np.random.default_rng(5), 8, zones, (352, 224))
    b = pem.jitter(region, np.random.default_rng(5), 8, zones, (352, 224))
    assert a.jitter_offset == b.jitter_offset
    assert np.array_equal(a.center, b.center)


def test_jitter_never_emits_invalid_region():
    rng = np.random.default_rng(9)
    hw = (CFG.canvas_h, CFG.canvas_w)
    face_rng = np.random.default_rng(10)
    for _ in range(100):
        kp = data.sample_canonical_keypoints(face_rng, CFG)
        zones = pem.exclusion_zones(kp, CFG)
        regions = pem.candidate_regions(kp, CFG)
        for _ in range(34):  # > 100*34 > 3000 jitters across faces
            for region in regions:
                moved = pem.jitter(region, rng, 8, zones, hw)
                assert region_in_bounds(moved, hw)
                assert region_clear_of_zones(moved, zones)


def test_jitter_offsets_are_integers_in_range():
    kp = canonical_keypoints(0, noise=False)
    region = pem.candidate_regions(kp, CFG)[0]
    zones = pem.exclusion_zones(kp, CFG)
    rng = np.random.default_rng(3)
    seen = set()
    for _ in range(200):
        moved = pem.jitter(region, rng, 8, zones, (352, 224))
        ox, oy = moved.jitter_offset
        assert isinstance(ox, int) and isinstance(oy, int)
        assert -8 <= ox <= 8 and -8 <= oy <= 8
        seen.add((ox, oy))
    assert len(seen) > 20


# --------------------------------------------------------------- selection

def test_select_k3_uses_every_region_once():
    face = aligned_face(4)
    ps = pem.select_patches(face, k=3, out_size=16, seed=11)
    assert sorted(r.region_id for r in ps.regions) == sorted(pem.REGION_IDS)


def test_select_patches_reproducible():
    face = aligned_face(5)
    a = pem.select_patches(face, k=2, out_size=32, seed=77)
    b = pem.select_patches(face, k=2, out_size=32, seed=77)
    assert [r.region_id for r in a.regions] == [r.region_id for r in b.regions]
    for pa, pb in zip(a.patches, b.patches):
        assert pa.tobytes() == pb.tobytes()


def test_select_pair_frequencies_near_uniform():
    face = aligned_face(6)
    counts = {}
    n = 9000
    for i in range(n):
        ps = pem.select_patches(face, k=2, out_size=4, seed=i)
        pair = frozenset(r.region_id for r in ps.regions)
        counts[pair] = counts.get(pair, 0) + 1
    assert len(counts) == 3
    for pair, c in counts.items():
        assert abs(c / n - 1 / 3) <= 0.05 * (1 / 3), (pair, c / n)


def test_select_rejects_bad_k():
    face = aligned_face(4)
    with pytest.raises(GeometryError):
        pem.select_patches(face, k=4, out_size=16, seed=0)


# --------------------------------------------------------------- extraction

def test_extract_exact_crop():
    rng = np.random.default_rng(8)
    img = rng.random((1, 3, 100, 100), dtype=np.float32)
    region = pem.PatchRegion(center=(50.0, 40.0), half_extent=16.0, region_id=pem.CHIN)
    out = pem.extract(img, region, out_size=32)
    assert np.array_equal(out, img[:, :, 24:56, 34:66])


def test_extract_constant_image():
    img = np.full((1, 3, 64, 64), 0.75, dtype=np.float32)
    region = pem.PatchRegion(center=(32.3, 30.7), half_extent=10.0, region_id=pem.CHIN)
    out = pem.extract(img, region, out_size=24)
    assert np.allclose(out, 0.75)
    assert out.shape == (1, 3, 24, 24)


def test_extract_stays_in_unit_range():
    rng = np.random.default_rng(10)
    img = rng.random((1, 3, 80, 80), dtype=np.float32)
    region = pem.PatchRegion(center=(40.1, 39.7), half_extent=17.3, region_id=pem.CHIN)
    out = pem.extract(img, region, out_size=64)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_extract_commutes_with_upsampling_on_smooth_images():
    # band-limited image: two low-frequency sinusoids
    ys, xs = np.mgrid[0:128, 0:128]
    img = 0.5 + 0.2 * np.sin(2 * np.pi * xs / 64) + 0.15 * np.cos(2 * np.pi * ys / 80)
    img = np.repeat(img[None], 3, axis=0).astype(np.float32)[None]
    region = pem.PatchRegion(center=(60.0, 66.0), half_extent=20.0, region_id=pem.CHIN)

    a = pem.extract(img, region, out_size=64)                      # extract, then 2x up
    a_up = data._upsample(a[0], 128)
    big = data._upsample(img[0], 256)[None]                        # 2x up, then extract
    region2 = pem.PatchRegion(center=region.center * 2, half_extent=40.0,
                              region_id=pem.CHIN)
    b = pem.extract(big, region2, out_size=128)
    assert np.abs(a_up - b[0]).max() <= 0.02


# --------------------------------------------------------------------- I/O

def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    img = (rng.integers(0, 256, (1, 3, 20, 30)) / 255.0).astype(np.float32)
    path = tmp_path / "f.ppm"
    pem.write_ppm(path, img)
    back = pem.read_ppm(path)
    assert back.shape == img.shape
    assert np.array_equal(back, img)


def test_ppm_comment_parsing(tmp_path):
    path = tmp_path / "c.ppm"
    body = bytes(range(12)) * 1
    path.write_bytes(b"P6\n# a comment\n2 2\n255\n" + body)
    img = pem.read_ppm(path)
    assert img.shape == (1, 3, 2, 2)


def test_ppm_rejects_wrong_maxval(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P6\n2 2\n65535\n" + bytes(24))
    with pytest.raises(ShapeError):
        pem.read_ppm(path)


def test_keypoints_sidecar_round_trip(tmp_path):
    kp = canonical_keypoints(3)
    path = tmp_path / "kp.json"
    pem.save_keypoints(path, kp)
    back = pem.load_keypoints(path)
    for name in pem.KEYPOINT_NAMES:
        assert np.allclose(getattr(back, name), getattr(kp, name))
    raw = json.loads(path.read_text())
    assert set(raw) == set(pem.KEYPOINT_NAMES)


def test_keypoints_missing_field(tmp_path):
    path = tmp_path / "kp.json"
    path.write_text(json.dumps({"left_eye_outer": [0, 0]}))
    with pytest.raises(GeometryError):
        pem.load_keypoints(path)


def test_patchset_round_trip(tmp_path):
    face = aligned_face(9)
    ps = pem.select_patches(face, k=3, out_size=32, seed=1)
    path = tmp_path / "p.w32"
    pem.save_patchset(path, ps)
    back = pem.load_patches(path)
    assert len(back) == 3
    for a, b in zip(ps.patches, back):
        assert a.tobytes() == b.tobytes()

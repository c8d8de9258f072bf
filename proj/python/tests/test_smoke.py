import itertools

import numpy as np
import pytest

import vipastain as vs


def scene(stain="he", seed=1, **kw):
    spec = vs.SceneSpec()
    spec.seed = seed
    for k, v in kw.items():
        setattr(spec, k, v)
    return vs.generate_scene(spec, stain)


def test_scene_shapes_and_determinism():
    a = scene(seed=5)
    b = scene(seed=5)
    assert a["image"].shape == (64, 64, 3)
    assert a["image"].dtype == np.uint8
    assert np.array_equal(a["image"], b["image"])
    assert not np.any(a["nucleus_mask"] & a["rbc_mask"])
    assert len(a["tls_boxes"]) == 1


def test_tls_box_bounds_its_mask():
    s = scene(seed=3, canvas_size=128, tls_cluster_density=30)
    (x, y, w, h), = s["tls_boxes"]
    ys, xs = np.nonzero(s["tls_masks"][0])
    assert (xs.min(), ys.min()) == (x, y)
    assert (xs.max() + 1, ys.max() + 1) == (x + w, y + h)


def brute_otsu(hist, k):
    hist = np.asarray(hist, dtype=float)
    idx = np.arange(len(hist))
    best, arg = -1.0, None
    for ts in itertools.combinations(range(len(hist) - 1), k):
        edges = [-1, *ts, len(hist) - 1]
        val = 0.0
        for lo, hi in zip(edges, edges[1:]):
            w = hist[lo + 1:hi + 1].sum()
            if w > 0:
                s = (hist[lo + 1:hi + 1] * idx[lo + 1:hi + 1]).sum()
                val += s * s / w
        if val > best * (1 + 1e-12) + 1e-12:
            best, arg = val, list(ts)
    return arg


@pytest.mark.parametrize("k", [1, 2])
def test_multi_otsu_matches_brute_force(k):
    rng = np.random.default_rng(k)
    for _ in range(20):
        hist = rng.integers(0, 50, size=24).tolist()
        assert vs.multi_otsu(hist, k) == brute_otsu(hist, k)


def test_calibrate_and_extract_masks():
    patches = [scene(seed=s)["image"] for s in range(6)]
    th = vs.calibrate("he", patches)
    assert len(th.blue) == 7
    assert th.blue == sorted(th.blue)
    masks = th.extract(patches[0])
    truth = scene(seed=0)["nucleus_mask"].astype(bool)
    got = masks["nucleus"].astype(bool)
    inter = np.logical_and(got, truth).sum()
    union = np.logical_or(got, truth).sum()
    assert inter / union >= 0.8


def test_iou_and_nms():
    assert vs.iou((0, 0, 10, 10), (0, 0, 10, 10)) == pytest.approx(1.0)
    assert vs.iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(50 / 150)
    kept = vs.nms([(0, 0, 10, 10), (1, 0, 10, 10), (30, 30, 5, 5)], [0.9, 0.8, 0.7], 0.5)
    assert kept == [0, 2]


def test_metrics():
    p, r = vs.precision_recall(3, 4, 6)
    assert (p, r) == pytest.approx((0.75, 0.5))
    assert vs.f1_score(0.75, 0.5) == pytest.approx(0.6)
    gt = np.zeros((4, 4), np.uint8)
    gt[:2] = 1
    pred = np.zeros((4, 4), np.uint8)
    pred[:, :2] = 1
    assert vs.mask_precision_recall(pred, gt) == pytest.approx((0.5, 0.5))


def test_frechet_distance_mean_shift():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(500, 3))
    assert vs.frechet_distance(a, a) == pytest.approx(0.0, abs=1e-9)
    assert vs.frechet_distance(a, a + 2.0) == pytest.approx(12.0, rel=1e-9)


def test_tile_stitch_round_trip():
    img = np.random.default_rng(1).integers(0, 256, size=(150, 170, 3), dtype=np.uint8)
    tiles = vs.tile_image(img, 64, 16)
    assert np.array_equal(vs.stitch(tiles, 170, 150), img)


def test_cli_usage_and_error():
    code, out, err = vs.run_cli(["--help"])
    assert code == 0
    assert "gen-corpus" in out
    code, _, err = vs.run_cli(["calibrate", "--stain", "he"])
    assert code == 2
    assert "manifest" in err


def test_errors_surface_as_exceptions():
    with pytest.raises(vs.VipastainError):
        vs.multi_otsu([5, 0, 0], 1)

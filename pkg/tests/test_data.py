import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rescnds import data as D
from rescnds.errors import CropError, DecodeError, ManifestError
from rescnds.tensor import save_tensor


def write_corpus(root, images, labels, classes=("a", "b", "c"), mean=None):
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        f = f"images/{i}.tcnds"
        save_tensor(root / f, img)
        records.append({"file": f, "label": lab})
    d = {"split": "train", "classes": list(classes), "height": images[0].shape[1],
         "width": images[0].shape[2], "records": records}
    if mean is not None:
        d["mean"] = list(mean)
    (root / "train.json").write_text(json.dumps(d))
    return root / "train.json"


# -- manifest ---------------------------------------------------------------

def test_manifest_basic(tmp_path, rng):
    path = write_corpus(tmp_path, [rng.uniform(0, 255, (3, 5, 5)) for _ in range(6)], [0, 1, 2, 0, 1, 2])
    m = D.load_manifest(path)
    assert m.num_classes == 3 and len(m.records) == 6
    assert m.labels().tolist() == [0, 1, 2, 0, 1, 2]


def test_manifest_bad_label(tmp_path, rng):
    path = write_corpus(tmp_path, [rng.uniform(0, 255, (3, 5, 5))] * 2, [0, 3])
    with pytest.raises(ManifestError, match="record 1"):
        D.load_manifest(path)


def test_manifest_missing_file(tmp_path, rng):
    path = write_corpus(tmp_path, [rng.uniform(0, 255, (3, 5, 5))] * 2, [0, 1])
    (tmp_path / "images" / "1.tcnds").unlink()
    with pytest.raises(ManifestError, match="1.tcnds"):
        D.load_manifest(path)


def test_manifest_absent(tmp_path):
    with pytest.raises(ManifestError):
        D.load_manifest(tmp_path / "nope.json")


def test_gray_corpus_means_written_back(tmp_path):
    v = 117.25
    path = write_corpus(tmp_path, [np.full((3, 4, 4), v)] * 5, [0, 1, 2, 0, 1])
    m = D.load_manifest(path)
    assert m.mean.tolist() == [v, v, v]
    assert json.loads(path.read_text())["mean"] == [v, v, v]


def test_means_match_direct_sum(tmp_path, rng):
    imgs = [rng.uniform(0, 255, (3, 6, 7)) for _ in range(4)]
    m = D.load_manifest(write_corpus(tmp_path, imgs, [0, 1, 2, 0]))
    direct = [sum(float(img[c].sum()) for img in imgs) / (4 * 42) for c in range(3)]
    np.testing.assert_allclose(m.mean, direct, rtol=0, atol=1e-10)


def test_declared_means_are_kept(tmp_path, rng):
    path = write_corpus(tmp_path, [rng.uniform(0, 255, (3, 4, 4))] * 3, [0, 1, 2], mean=[1, 2, 3])
    assert D.load_manifest(path).mean.tolist() == [1.0, 2.0, 3.0]


def test_geometry_mismatch(tmp_path, rng):
    path = write_corpus(tmp_path, [rng.uniform(0, 255, (3, 4, 4))] * 2, [0, 1])
    save_tensor(tmp_path / "images" / "1.tcnds", np.zeros((3, 5, 4)))
    with pytest.raises(DecodeError):
        D.load_split(D.load_manifest(path, mean=[0, 0, 0]))


def test_manifest_round_trip(tmp_path, small_root):
    m = D.load_manifest(small_root / "train.json")
    D.write_manifest(m, tmp_path / "copy.json")
    # records are relative, so the copy is read from the same root
    copy = tmp_path / "copy.json"
    (small_root / "copy.json").write_text(copy.read_text())
    back = D.load_manifest(small_root / "copy.json")
    assert back.records == m.records
    assert back.mean.tobytes() == m.mean.tobytes()
    assert back.classes == m.classes


# -- preprocessing ----------------------------------------------------------

def test_preprocess_centering():
    mean = np.array([10.0, 20.0, 30.0])
    img = np.broadcast_to(mean[:, None, None], (3, 4, 4)).copy()
    assert not D.preprocess(img, mean).any()


def test_preprocess_not_idempotent(rng):
    mean = np.array([1.0, 2.0, 3.0])
    img = rng.uniform(0, 255, (3, 4, 4))
    twice = D.preprocess(D.preprocess(img, mean), mean)
    np.testing.assert_allclose(twice, img - 2 * mean[:, None, None], atol=1e-12)


def test_preprocess_channel_means(rng):
    mean = np.array([100.5, 90.25, 80.125])
    img = rng.uniform(0, 255, (3, 9, 9))
    out = D.preprocess(img, mean)
    for c in range(3):
        direct = sum(float(v) for v in img[c].ravel()) / 81
        assert abs(out[c].mean() - (direct - mean[c])) < 1e-10


def test_preprocess_rejects_bad_geometry(small_root):
    m = D.load_manifest(small_root / "train.json")
    with pytest.raises(DecodeError):
        D.preprocess(np.zeros((3, 5, 5)), m)
    with pytest.raises(DecodeError):
        D.preprocess(np.zeros((1, 36, 36)), m)


# -- crops ------------------------------------------------------------------

def test_augment_degenerate():
    img = np.arange(48.0).reshape(3, 4, 4)
    seen = set()
    for s in range(40):
        out = D.augment_train(img, 4, s)
        assert np.array_equal(out, img) or np.array_equal(out, img[..., ::-1])
        seen.add(np.array_equal(out, img))
    assert seen == {True, False}


def test_augment_deterministic():
    img = np.random.default_rng(0).normal(size=(3, 10, 10))
    a = [D.augment_train(img, 6, np.random.default_rng(7)) for _ in range(3)]
    r1, r2 = np.random.default_rng(8), np.random.default_rng(8)
    s1 = [D.augment_train(img, 6, r1).tobytes() for _ in range(20)]
    s2 = [D.augment_train(img, 6, r2).tobytes() for _ in range(20)]
    assert s1 == s2
    assert a[0].tobytes() == a[1].tobytes() == a[2].tobytes()


def test_augment_draw_statistics():
    # pixel value encodes position, so the origin and flip can be read back
    src = np.broadcast_to((np.arange(36)[:, None] * 100 + np.arange(36))[None], (3, 36, 36)).astype(float)
    r = np.random.default_rng(2024)
    origins, flips, n = set(), 0, 10_000
    for _ in range(n):
        out = D.augment_train(src, 32, r)
        flipped = out[0, 0, 0] > out[0, 0, -1]
        flips += flipped
        tl = out[0, 0, -1] if flipped else out[0, 0, 0]
        origins.add((int(tl) // 100, int(tl) % 100))
    assert origins == {(i, j) for i in range(5) for j in range(5)}
    assert abs(flips / n - 0.5) <= 0.02


def test_crop_too_big():
    for fn in (lambda t: D.augment_train(t, 6, 0), lambda t: D.ten_crop(t, 6),
               lambda t: D.center_crop(t, 6)):
        with pytest.raises(CropError):
            fn(np.zeros((3, 5, 5)))


def test_ten_crop_hand_enumerated():
    src = np.arange(16.0).reshape(1, 4, 4)
    crops = [c[0].tolist() for c in D.ten_crop(src, 2)]
    expect = [
        [[0, 1], [4, 5]],       # top-left
        [[2, 3], [6, 7]],       # top-right
        [[8, 9], [12, 13]],     # bottom-left
        [[10, 11], [14, 15]],   # bottom-right
        [[5, 6], [9, 10]],      # centre
        [[1, 0], [5, 4]],
        [[3, 2], [7, 6]],
        [[9, 8], [13, 12]],
        [[11, 10], [15, 14]],
        [[6, 5], [10, 9]],
    ]
    assert crops == expect


def test_ten_crop_degenerate(rng):
    img = rng.normal(size=(3, 5, 5))
    crops = D.ten_crop(img, 5)
    assert all(np.array_equal(c, img) for c in crops[:5])
    assert all(np.array_equal(c, img[..., ::-1]) for c in crops[5:])


def test_ten_crop_symmetric_image(rng):
    half = rng.normal(size=(3, 7, 4))
    img = np.concatenate([half, half[..., ::-1]], axis=-1)
    crops = D.ten_crop(img, 4)
    assert np.array_equal(crops[4], crops[9])
    assert np.array_equal(crops[0], crops[6])  # TL mirrors onto flipped TR


def test_ten_crop_is_pure(rng):
    img = rng.normal(size=(3, 9, 9))
    assert [c.tobytes() for c in D.ten_crop(img, 5)] == [c.tobytes() for c in D.ten_crop(img, 5)]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_crop_shapes_and_flip_involution(h, w, data):
    c = data.draw(st.integers(1, min(h, w)))
    img = np.random.default_rng(h * 13 + w).normal(size=(3, h, w))
    out = D.augment_train(img, c, data.draw(st.integers(0, 2**32)))
    assert out.shape == (3, c, c)
    assert all(x.shape == (3, c, c) for x in D.ten_crop(img, c))
    assert D.flip(D.flip(img)).tobytes() == img.tobytes()


def test_synthetic_dataset_layout(toy_root):
    train = D.load_manifest(toy_root / "train.json")
    test = D.load_manifest(toy_root / "test.json")
    assert (len(train.records), len(test.records)) == (600, 300)
    assert (train.height, train.width) == (40, 40)
    assert train.classes == D.SYNTHETIC_CLASSES
    assert np.bincount(train.labels()).tolist() == [200, 200, 200]
    assert test.mean.tobytes() == train.mean.tobytes()

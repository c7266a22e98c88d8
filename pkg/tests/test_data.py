import numpy as np
import pytest

from dilres.data import (ImageFormatError, Manifest, ManifestError, SyntheticSpec, decode_ppm, encode_ppm,
                         generate_synthetic, load_images, load_manifest, motif_box, parse_manifest,
                         reduce_multilabel, resize_bilinear, split, synthetic_arrays, to_image, to_tensor)


def test_decode_white_pixel():
    assert decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").tolist() == [[[255, 255, 255]]]
    assert decode_ppm(b"P5 2 1 255 \x00\x07").tolist() == [[0, 7]]


def test_comments_parse_identically():
    raster = bytes(range(12))
    plain = b"P6\n2 2\n255\n" + raster
    noted = b"P6 # made by hand\n2 # width\n# a full comment line\n2\n255\n" + raster
    assert np.array_equal(decode_ppm(plain), decode_ppm(noted))


def test_roundtrip(rng):
    for shape in [(5, 7, 3), (4, 9), (1, 1, 3)]:
        img = rng.integers(0, 256, shape, dtype=np.uint8)
        data = encode_ppm(img)
        assert np.array_equal(decode_ppm(data), img)
        assert encode_ppm(decode_ppm(data)) == data


def test_canonical_header():
    assert encode_ppm(np.zeros((2, 3, 3), dtype=np.uint8)).startswith(b"P6\n3 2\n255\n")


@pytest.mark.parametrize("data", [
    b"P3\n1 1\n255\n000",
    b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00",
    b"P6\n2 2\n255\n\x00\x00",
    b"P6\n1\n",
    b"P6\nx 1\n255\n\x00\x00\x00",
    b"P6\n0 1\n255\n",
    b"",
])
def test_decode_errors(data):
    with pytest.raises(ImageFormatError):
        decode_ppm(data)


def test_encode_rejects_non_uint8():
    with pytest.raises(ImageFormatError):
        encode_ppm(np.zeros((2, 2, 3), dtype=np.float32))


def test_resize_examples():
    img = np.array([[[0] * 3, [0] * 3], [[10] * 3, [10] * 3]], dtype=np.uint8)
    assert resize_bilinear(img, 1, 1)[0, 0].tolist() == [5, 5, 5]
    row = np.array([[0, 10]], dtype=np.uint8)
    # src = (dst + 0.5) / 2 - 0.5 gives taps at -0.25, 0.25, 0.75, 1.25 -> 0, 2.5, 7.5, 10
    assert resize_bilinear(row, 4, 1).tolist() == [[0, 3, 8, 10]]
    same = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    assert np.array_equal(resize_bilinear(same, 2, 2), same)
    with pytest.raises(ValueError):
        resize_bilinear(same, 0, 2)


def test_to_tensor():
    t = to_tensor(np.full((1, 1, 3), 255, dtype=np.uint8))
    assert t.shape == (1, 3, 1, 1) and t.ravel().tolist() == [1.0, 1.0, 1.0]
    assert not to_tensor(np.zeros((4, 4, 3), dtype=np.uint8)).any()
    v = to_tensor(np.full((1, 1, 3), 128, dtype=np.uint8), np.float64)
    assert v[0, 0, 0, 0] == pytest.approx(0.50196, abs=1e-5)


def test_to_image_inverts_to_tensor(rng):
    img = rng.integers(0, 256, (6, 5, 3), dtype=np.uint8)
    assert np.array_equal(to_image(to_tensor(img)), img)


def test_manifest_parse():
    m = parse_manifest("path,label\na.ppm,0\nb.ppm,3\n")
    assert m.rows == [("a.ppm", 0), ("b.ppm", 3)]
    assert m.labels.tolist() == [0, 3]


@pytest.mark.parametrize("text, line", [
    ("file,label\n", "line 1"),
    ("path,label\na.ppm,x\n", "line 2"),
    ("path,label\na.ppm,0\nb.ppm,8\n", "line 3"),
    ("path,label\na.ppm,0\na.ppm,1\n", "line 3"),
    ("path,label\na.ppm\n", "line 2"),
])
def test_manifest_errors_carry_line(text, line):
    with pytest.raises(ManifestError, match=line):
        parse_manifest(text)


def test_multilabel_reduction():
    assert reduce_multilabel([0]) == 0
    assert reduce_multilabel([0, 5, 2]) == 2
    assert parse_manifest("path,label\na.ppm,0;4\n").rows == [("a.ppm", 4)]


def _rows(per_class, classes=8):
    return Manifest([(f"{c}_{i}.ppm", c) for c in range(classes) for i in range(per_class)])


def test_split_counts():
    train, test = split(_rows(10), 0.8, seed=0)
    assert np.bincount(train.labels).tolist() == [8] * 8
    assert np.bincount(test.labels).tolist() == [2] * 8
    full, empty = split(_rows(3), 1.0)
    assert len(full) == 24 and len(empty) == 0
    with pytest.raises(ValueError):
        split(_rows(3), 1.5)


def test_split_deterministic_and_seeded():
    a = split(_rows(10), 0.5, seed=4)
    b = split(_rows(10), 0.5, seed=4)
    c = split(_rows(10), 0.5, seed=5)
    assert a[0].rows == b[0].rows and a[0].rows != c[0].rows


def test_generate_counts_and_determinism(tmp_path):
    spec = SyntheticSpec(samples_per_class=10, image_size=32)
    m1 = generate_synthetic(spec, tmp_path / "a")
    m2 = generate_synthetic(spec, tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").glob("*.ppm"))
    assert len(files) == 80 and len(m1) == 80
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    loaded = load_manifest(tmp_path / "a" / "manifest.csv")
    assert loaded.rows == m2.rows
    x = load_images(loaded, size=16)
    assert x.shape == (80, 3, 16, 16) and x.dtype == np.float32


def _region_features(images, spec):
    gray = images.astype(np.float64).mean(axis=-1)
    feats = []
    for label in range(spec.class_count):
        r0, r1, c0, c1 = motif_box(spec, label)
        feats.append(gray[:, r0:r1, c0:c1].mean(axis=(1, 2)))
    return np.column_stack(feats + [np.ones(len(images))])


def test_linear_baseline_separates_corpus():
    train_spec = SyntheticSpec(samples_per_class=40, seed=0)
    test_spec = SyntheticSpec(samples_per_class=20, seed=1)
    xtr, ytr = synthetic_arrays(train_spec)
    xte, yte = synthetic_arrays(test_spec)
    Ftr, Fte = _region_features(xtr, train_spec), _region_features(xte, test_spec)
    W = np.linalg.lstsq(Ftr, np.eye(8)[ytr], rcond=None)[0]
    acc = float(np.mean(np.argmax(Fte @ W, axis=1) == yte))
    assert acc > 0.9

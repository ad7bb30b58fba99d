import json

import numpy as np
import pytest
from scipy import ndimage

from sacnn.data_io import (
    AnnotatedImage,
    Dataset,
    load_dataset,
    read_dataset,
    read_image,
    read_pgm,
    synth_generate,
    write_dataset,
    write_pgm,
)
from sacnn.errors import DataError


def write_manifest(tmp_path, lines, size=(16, 12)):
    W, H = size
    (tmp_path / "img").mkdir(exist_ok=True)
    write_pgm(tmp_path / "img" / "a.pgm", np.full((H, W), 0.5))
    path = tmp_path / "manifest.jsonl"
    path.write_text("".join(line + "\n" for line in lines))
    return path


def record(rec_id="a", heads=()):
    return json.dumps({"id": rec_id, "image": "img/a.pgm", "heads": [list(h) for h in heads]})


# -- manifests ----------------------------------------------------------------------


def test_load_two_records(tmp_path):
    ds = load_dataset(write_manifest(tmp_path, [record("a", [(1, 2)]), record("b", [(15.5, 11.9), (0, 0)])]))
    assert len(ds) == 2
    assert [r.id for r in ds] == ["a", "b"]
    assert ds[1].count == 2 and ds[0].shape == (12, 16)
    assert ds[0].image[0, 0, 0, 0] == pytest.approx(128 / 255)


def test_head_one_past_edge_rejected(tmp_path):
    path = write_manifest(tmp_path, [record("a", [(1, 1)]), record("b", [(16, 0)])])
    with pytest.raises(DataError, match=r"manifest.jsonl:2"):
        load_dataset(path)


def test_empty_manifest(tmp_path):
    with pytest.raises(DataError):
        load_dataset(write_manifest(tmp_path, []))


def test_malformed_line(tmp_path):
    with pytest.raises(DataError, match=r":2: malformed"):
        load_dataset(write_manifest(tmp_path, [record(), "{not json"]))


def test_missing_image(tmp_path):
    line = json.dumps({"id": "x", "image": "img/missing.pgm", "heads": []})
    with pytest.raises(DataError, match=r":1: image not found"):
        load_dataset(write_manifest(tmp_path, [line]))


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope.jsonl")


def test_annotated_image_validates_eagerly():
    with pytest.raises(DataError):
        AnnotatedImage("x", np.zeros((1, 1, 4, 4)), [(4, 0)])
    with pytest.raises(DataError):
        AnnotatedImage("x", np.full((1, 1, 4, 4), 1.5))
    with pytest.raises(DataError):
        AnnotatedImage("x", np.zeros((4, 4)))


# -- image files ------------------------------------------------------------------------


def test_pgm_roundtrip(tmp_path, rng):
    g = rng.uniform(size=(7, 9))
    write_pgm(tmp_path / "x.pgm", g)
    back = read_pgm(tmp_path / "x.pgm")
    assert back.shape == (7, 9)
    assert np.max(np.abs(back - g)) <= 0.5 / 255 + 1e-12


def test_png_luma(tmp_path):
    from PIL import Image

    rgb = np.zeros((2, 3, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 0)
    rgb[1, 2] = (10, 200, 30)
    Image.fromarray(rgb, "RGB").save(tmp_path / "x.png")
    img = read_image(tmp_path / "x.png")
    assert img.shape == (1, 1, 2, 3)
    assert img[0, 0, 0, 0] == pytest.approx(0.299)
    assert img[0, 0, 1, 2] == pytest.approx((0.299 * 10 + 0.587 * 200 + 0.114 * 30) / 255)


def test_png_grayscale(tmp_path):
    from PIL import Image

    Image.fromarray(np.array([[0, 255]], dtype=np.uint8), "L").save(tmp_path / "g.png")
    np.testing.assert_array_equal(read_image(tmp_path / "g.png")[0, 0], [[0.0, 1.0]])


# -- synthetic scenes ---------------------------------------------------------------------


def test_synth_blank():
    ds = synth_generate(0, 3, 32, 32, (0, 0))
    assert all(r.count == 0 for r in ds)
    assert all(r.image.min() > 0.6 for r in ds)


def test_synth_deterministic():
    a, b = synth_generate(7, 5, 64, 64, (5, 15)), synth_generate(7, 5, 64, 64, (5, 15))
    for x, y in zip(a, b):
        assert x.id == y.id and x.heads == y.heads and x.image.tobytes() == y.image.tobytes()


def test_synth_seeds_differ():
    assert synth_generate(1, 1, 32, 32, (3, 8))[0].image.tobytes() != synth_generate(2, 1, 32, 32, (3, 8))[0].image.tobytes()


def test_synth_counts_match_drawn_discs():
    for rec in synth_generate(7, 5, 64, 64, (5, 15)):
        assert 5 <= rec.count <= 15
        dark = rec.image[0, 0] < 0.55
        labels, n = ndimage.label(dark)
        assert n == rec.count
        # every annotated head sits on its own disc
        assert sorted(labels[int(p.y), int(p.x)] for p in rec.heads) == list(range(1, n + 1))


def test_synth_unsatisfiable():
    with pytest.raises(DataError):
        synth_generate(0, 1, 16, 16, (10, 10))


# -- round trip ---------------------------------------------------------------------------


def test_dataset_roundtrip(tmp_path):
    ds = synth_generate(3, 3, 32, 48, (2, 6))
    manifest = write_dataset(ds, tmp_path / "d")
    back = read_dataset(manifest)
    assert [r.id for r in back] == [r.id for r in ds]
    for a, b in zip(ds, back):
        assert a.heads == b.heads
        assert np.max(np.abs(a.image - b.image)) <= 1 / 255


def test_overwrite_refused(tmp_path):
    ds = synth_generate(3, 1, 32, 32, (2, 6))
    write_dataset(ds, tmp_path)
    with pytest.raises(FileExistsError):
        write_dataset(ds, tmp_path)
    write_dataset(ds, tmp_path, force=True)


def test_subset():
    ds = synth_generate(3, 4, 32, 32, (1, 2))
    sub = ds.subset([3, 1])
    assert isinstance(sub, Dataset) and [r.id for r in sub] == [ds[3].id, ds[1].id]

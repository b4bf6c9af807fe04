import numpy as np
import pytest

from prepguard import codecs as C
from prepguard import data as D


def test_synth_deterministic_and_balanced():
    a = D.synth_dataset(60, 10, 16, 16, seed=9)
    b = D.synth_dataset(60, 10, 16, 16, seed=9)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [6] * 10
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert D.synth_dataset(60, 10, 16, 16, seed=10).images.tobytes() != a.images.tobytes()


@pytest.mark.parametrize("args", [(5, 10), (10, 1), (20, 11)])
def test_synth_rejects_bad_params(args):
    with pytest.raises(ValueError):
        D.synth_dataset(*args)


def test_split_is_disjoint_stream():
    tr, ev = D.synth_split(3, n_train=50, n_eval=20)
    assert len(tr) == 50 and len(ev) == 20
    assert not np.array_equal(tr.images[:20], ev.images)


def test_asymmetric_classes_change_under_flip():
    ds = D.synth_dataset(200, 10, 32, 32, seed=1)
    names = [name for name, _ in D.CLASS_TABLE]
    assert len(D.ASYMMETRIC_PATTERNS) >= 5
    for k, name in enumerate(names):
        if name not in D.ASYMMETRIC_PATTERNS:
            continue
        imgs = ds.images[ds.labels == k]
        d = np.mean([np.linalg.norm(x - C.flip_lr(x)) for x in imgs])
        assert d > 0.1, name


def test_png_round_trip(tmp_path):
    ds = D.synth_dataset(20, 10, 8, 8, seed=4)
    D.save_dataset(ds, tmp_path)
    back = D.load_dataset(tmp_path)
    assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-12
    assert np.array_equal(back.labels, ds.labels)


def test_grayscale_png(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4, 1)
    D.save_png(tmp_path / "g.png", img)
    assert D.load_png(tmp_path / "g.png").shape == (3, 4, 1)


def test_duplicates_kept(tmp_path):
    D.save_png(tmp_path / "a.png", np.zeros((4, 4, 3)))
    (tmp_path / "manifest.csv").write_text("path,label\na.png,0\na.png,1\n")
    ds = D.load_dataset(tmp_path)
    assert len(ds) == 2 and ds.labels.tolist() == [0, 1]


@pytest.mark.parametrize("manifest,row", [
    ("path,label\n", None),
    ("path,label\nmissing.png,0\n", 1),
    ("path,label\na.png,0\nb.png,0\n", 2),
    ("path,label\na.png,x\n", 1),
    ("path,label\na.png,5\n", 1),
])
def test_ingestion_errors(tmp_path, manifest, row):
    D.save_png(tmp_path / "a.png", np.zeros((4, 4, 3)))
    D.save_png(tmp_path / "b.png", np.zeros((5, 4, 3)))
    (tmp_path / "manifest.csv").write_text(manifest)
    with pytest.raises(D.IngestionError) as err:
        D.load_dataset(tmp_path, num_classes=3)
    assert err.value.row == row


def test_missing_manifest(tmp_path):
    with pytest.raises(D.IngestionError):
        D.load_dataset(tmp_path)

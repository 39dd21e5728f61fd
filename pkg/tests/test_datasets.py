import numpy as np
import pytest

from lacoot.datasets import (DatasetSpec, generate_dataset, load_cloud_csv, load_csv, make_splits)


def best_linear_accuracy(X, y, n_angles=360):
    """Brute force: best threshold classifier on any 1-D projection."""
    best = 0.0
    for angle in np.linspace(0.0, np.pi, n_angles, endpoint=False):
        proj = X @ np.array([np.cos(angle), np.sin(angle)])
        order = np.argsort(proj)
        ys = y[order]
        # predict class 1 above the cut: correct = (# zeros below) + (# ones above)
        zeros_below = np.concatenate([[0], np.cumsum(ys == 0)])
        ones_above = np.concatenate([[0], np.cumsum((ys == 1)[::-1])])[::-1]
        acc = (zeros_below + ones_above) / len(y)
        best = max(best, acc.max(), (1 - acc).max())
    return best


def test_blobs_without_noise_sit_on_centers():
    data = generate_dataset(DatasetSpec(kind="blobs", n_samples=60, n_classes=3, input_dim=2, noise=0.0))
    for c in range(3):
        pts = data.X[data.y == c]
        assert np.all(pts == pts[0])
    assert len({tuple(p) for p in data.X}) == 3


def test_rings_are_not_linearly_separable():
    data = generate_dataset(DatasetSpec(kind="rings", n_samples=2000, noise=0.05, seed=0))
    radius = np.linalg.norm(data.X, axis=1)
    assert np.allclose(radius[data.y == 0].mean(), 1.0, atol=0.02)
    assert np.allclose(radius[data.y == 1].mean(), 2.0, atol=0.02)
    assert best_linear_accuracy(data.X, data.y) <= 0.75


def test_xor_labels_quadrant_parity():
    data = generate_dataset(DatasetSpec(kind="xor", n_samples=400, noise=0.0, seed=1))
    assert np.array_equal(data.y, (data.X[:, 0] * data.X[:, 1] < 0).astype(int))


def test_generation_is_deterministic():
    spec = DatasetSpec(kind="rings", n_samples=300, input_dim=3, seed=4)
    a, b = generate_dataset(spec), generate_dataset(spec)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert a.X.shape == (300, 3)


def test_split_sizes_and_disjointness():
    sp = make_splits(DatasetSpec(n_samples=2000))
    assert (len(sp.train), len(sp.val), len(sp.test)) == (1200, 400, 400)
    rows = {tuple(r) for part in (sp.train, sp.val, sp.test) for r in part.X}
    assert len(rows) == 2000


@pytest.mark.parametrize("kwargs", [
    {"split": (0.5, 0.5, 0.1)},
    {"split": (1.0, 0.0, 0.0)},
    {"noise": -1.0},
    {"kind": "xor", "n_classes": 3},
    {"kind": "csv"},
    {"n_classes": 1},
])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        DatasetSpec(**kwargs)


def test_load_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label,b\n1.5,0,2\n-1,1,0.25\n", encoding="utf-8")
    data = load_csv(p)
    assert np.array_equal(data.X, [[1.5, 2.0], [-1.0, 0.25]])
    assert list(data.y) == [0, 1]
    sp = make_splits(DatasetSpec(kind="csv", path=str(p), split=(0.5, 0.25, 0.25)))
    assert len(sp.train) == 1


def test_csv_errors_name_row_and_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,label\n1,0\nfoo,1\n", encoding="utf-8")
    with pytest.raises(ValueError, match=r"row 3, column 'a'"):
        load_csv(p)
    p.write_text("a,label\n1,0.5\n", encoding="utf-8")
    with pytest.raises(ValueError, match=r"row 2, column 'label'"):
        load_csv(p)
    p.write_text("a,b\n1,0\n", encoding="utf-8")
    with pytest.raises(ValueError, match="label"):
        load_csv(p)
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv")


def test_load_cloud_csv(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x,y\n0,1\n2,3\n", encoding="utf-8")
    assert np.array_equal(load_cloud_csv(p), [[0, 1], [2, 3]])
    p.write_text("x,y\n0\n", encoding="utf-8")
    with pytest.raises(ValueError, match="row 2"):
        load_cloud_csv(p)

import numpy as np
import pytest

from coprop import io


def test_label_grid_round_trip(tmp_path):
    grid = np.arange(12).reshape(3, 4) % 5
    io.write_label_grid(tmp_path / "a.labels", grid)
    assert (tmp_path / "a.labels").read_text().startswith("P_LABELS 4 3\n")
    np.testing.assert_array_equal(io.read_label_grid(tmp_path / "a.labels"), grid)


def test_mask_round_trip_and_rejects_other_values(tmp_path):
    mask = np.array([[True, False], [False, True], [True, True]])
    io.write_mask(tmp_path / "m", mask)
    np.testing.assert_array_equal(io.read_mask(tmp_path / "m"), mask)
    (tmp_path / "bad").write_text("P_MASK 2 1\n0 2\n")
    with pytest.raises(io.FormatError):
        io.read_mask(tmp_path / "bad")


@pytest.mark.parametrize("text", ["P_LABELS 2 2\n1 2 3\n", "P_MASK 2 2\n0 0 0 0\n",
                                  "P_LABELS 0 2\n", "P_LABELS 2 1\n1 x\n"])
def test_malformed_label_grids(tmp_path, text):
    (tmp_path / "g").write_text(text)
    with pytest.raises(io.FormatError):
        io.read_label_grid(tmp_path / "g")


def test_rgb_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    rgb[0, 0] = (10, 10, 10)   # newline byte inside the body
    io.write_rgb(tmp_path / "x.rgb", rgb)
    np.testing.assert_array_equal(io.read_rgb(tmp_path / "x.rgb"), rgb)
    (tmp_path / "short.rgb").write_bytes(b"P_RGB 2 2\n" + bytes(5))
    with pytest.raises(io.FormatError):
        io.read_rgb(tmp_path / "short.rgb")


def test_merge_table_is_symmetric_and_exact(tmp_path):
    table = {(1, 2): 0.3, (2, 1): 0.3, (2, 5): 1 / 3, (5, 2): 1 / 3}
    io.write_merge_table(tmp_path / "t", table)
    assert io.read_merge_table(tmp_path / "t") == table


def test_merge_table_conflict(tmp_path):
    (tmp_path / "t").write_text("1 2 0.3\n2 1 0.4\n")
    with pytest.raises(io.FormatError):
        io.read_merge_table(tmp_path / "t")


def test_histogram_table_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    hists = {3: rng.dirichlet(np.ones(4096)), 8: rng.dirichlet(np.ones(4096))}
    io.write_histogram_table(tmp_path / "h", hists)
    back = io.read_histogram_table(tmp_path / "h")
    assert sorted(back) == [3, 8]
    for k in hists:
        np.testing.assert_array_equal(back[k], hists[k])


def test_correspondence_round_trip(tmp_path):
    rows = np.array([[0, 1, 2, 3, 0.75], [4, 4, 0, 0, 1.0]])
    io.write_correspondences(tmp_path / "c", "a", "b", rows)
    src, dst, back = io.read_correspondences(tmp_path / "c")
    assert (src, dst) == ("a", "b")
    np.testing.assert_array_equal(back, rows)


def test_correspondence_bad_header(tmp_path):
    (tmp_path / "c").write_text("MATCH a b\n")
    with pytest.raises(io.FormatError):
        io.read_correspondences(tmp_path / "c")

import numpy as np

from snnc.reporting import config_hash, meta_comment, read_csv, write_csv


def test_csv_round_trip(tmp_path):
    path = tmp_path / "table.csv"
    rows = [(0, 0.5, "pgd"), (1, np.float64(0.25), "fgsm")]
    meta = {"config_hash": "abc123", "seed": 7, "version": "0.1.0"}
    write_csv(path, ("epoch", "value", "name"), rows, meta)
    got_rows, got_meta = read_csv(path)
    assert got_meta == {"config_hash": "abc123", "seed": "7",
                        "version": "0.1.0"}
    assert got_rows[0] == {"epoch": "0", "value": "0.5", "name": "pgd"}
    assert float(got_rows[1]["value"]) == 0.25

    # identical inputs, identical bytes
    path2 = tmp_path / "again.csv"
    write_csv(path2, ("epoch", "value", "name"), rows, meta)
    assert path.read_bytes() == path2.read_bytes()


def test_config_hash_stable_and_order_free():
    a = config_hash({"x": 1, "y": [1, 2]})
    b = config_hash({"y": [1, 2], "x": 1})
    assert a == b and len(a) == 16
    assert config_hash({"x": 2}) != a


def test_meta_comment_floats_round_trip():
    line = meta_comment({"lr": 0.1, "n": 3})
    assert line.startswith("# ")
    assert "lr=0.1" in line and "n=3" in line

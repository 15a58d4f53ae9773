import struct

import numpy as np
import pytest

from app.artifacts import (
    decode_tensor,
    encode_tensor,
    read_feature_map,
    read_json,
    read_jsonl,
    read_tensor,
    write_csv,
    write_json,
    write_jsonl,
    write_tensor,
)
from app.errors import ArtifactIOError


def test_header_layout():
    payload = encode_tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert payload[:4] == b"GBEV"
    assert struct.unpack_from("<II", payload, 4) == (1, 2)
    assert struct.unpack_from("<2Q", payload, 12) == (2, 3)
    assert np.frombuffer(payload, dtype="<f4", offset=28).tolist() == [0, 1, 2, 3, 4, 5]


def test_tensor_file_preserves_values(tmp_path, rng):
    arr = rng.normal(size=(1, 2, 3, 4)).astype(np.float32)
    write_tensor(tmp_path / "x.gbev", arr)
    np.testing.assert_array_equal(read_tensor(tmp_path / "x.gbev"), arr)
    assert read_feature_map(tmp_path / "x.gbev").shape == (1, 2, 3, 4)


@pytest.mark.parametrize(
    "payload",
    [
        b"GB",
        b"XXXX" + struct.pack("<II", 1, 0),
        b"GBEV" + struct.pack("<II", 2, 0),
        b"GBEV" + struct.pack("<II", 1, 1) + struct.pack("<Q", 3) + b"\x00" * 8,
    ],
)
def test_corrupt_payloads(payload):
    with pytest.raises(ArtifactIOError):
        decode_tensor(payload)


def test_missing_files_name_the_path(tmp_path):
    with pytest.raises(ArtifactIOError) as excinfo:
        read_tensor(tmp_path / "absent.gbev")
    assert excinfo.value.path == str(tmp_path / "absent.gbev")
    with pytest.raises(ArtifactIOError):
        read_json(tmp_path / "absent.json")


def test_feature_map_needs_rank_four(tmp_path):
    write_tensor(tmp_path / "flat.gbev", np.zeros(5))
    with pytest.raises(ArtifactIOError):
        read_feature_map(tmp_path / "flat.gbev")


def test_json_is_sorted_and_rejects_nan(tmp_path):
    write_json(tmp_path / "a.json", {"b": 1, "a": [1, 2]})
    assert (tmp_path / "a.json").read_text().index('"a"') < (tmp_path / "a.json").read_text().index('"b"')
    assert read_json(tmp_path / "a.json") == {"a": [1, 2], "b": 1}
    with pytest.raises(ArtifactIOError):
        write_json(tmp_path / "nan.json", {"loss": float("nan")})


def test_jsonl_and_csv(tmp_path):
    rows = [{"iter": 0, "loss": 2.0}, {"iter": 1, "loss": 1.5}]
    write_jsonl(tmp_path / "log.jsonl", rows)
    assert read_jsonl(tmp_path / "log.jsonl") == rows
    write_csv(tmp_path / "t.csv", ["k", "median"], [[5, 0.1], [8, 0.05]])
    assert (tmp_path / "t.csv").read_text().splitlines() == ["k,median", "5,0.1", "8,0.05"]


def test_csv_leaves_missing_values_empty(tmp_path):
    write_csv(tmp_path / "t.csv", ["k", "win_fraction"], [[5, None]])
    assert (tmp_path / "t.csv").read_text().splitlines() == ["k,win_fraction", "5,"]


def test_corrupt_jsonl_names_the_path(tmp_path):
    (tmp_path / "log.jsonl").write_text('{"iter": 0}\n{"iter": \n')
    with pytest.raises(ArtifactIOError) as excinfo:
        read_jsonl(tmp_path / "log.jsonl")
    assert excinfo.value.path == str(tmp_path / "log.jsonl")

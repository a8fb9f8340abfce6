import numpy as np
import pytest

from core.errors import ArtifactError
from utils.file_utils import FileManager


def test_ppm_round_trip(tmp_path):
    image = np.random.default_rng(0).integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    path = FileManager.write_ppm(str(tmp_path / "frame.ppm"), image)
    with open(path, "rb") as f:
        assert f.read(12) == b"P6\n32 32\n255"
    assert np.array_equal(FileManager.read_ppm(path), image)


def test_ppm_rejects_grayscale(tmp_path):
    with pytest.raises(ArtifactError):
        FileManager.write_ppm(str(tmp_path / "gray.ppm"), np.zeros((4, 4), dtype=np.uint8))


def test_truncated_ppm(tmp_path):
    path = tmp_path / "short.ppm"
    path.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(ArtifactError) as exc:
        FileManager.read_ppm(str(path))
    assert exc.value.path == str(path)


def test_write_json_is_sorted_and_atomic(tmp_path):
    path = FileManager.write_json(str(tmp_path / "nested" / "out.json"), {"b": 1, "a": [1, 2]})
    with open(path, encoding="utf-8") as f:
        text = f.read()
    assert text.index('"a"') < text.index('"b"')
    assert text.endswith("\n")
    assert not (tmp_path / "nested" / "out.json.tmp").exists()
    assert FileManager.read_json(path) == {"a": [1, 2], "b": 1}


def test_read_json_errors(tmp_path):
    with pytest.raises(ArtifactError):
        FileManager.read_json(str(tmp_path / "none.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(ArtifactError):
        FileManager.read_json(str(broken))


def test_find_files_is_sorted_and_filtered(tmp_path):
    for name in ("b/2.traj", "a/1.traj", "a/notes.txt", "c.json"):
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"x")
    found = FileManager.find_files(str(tmp_path), [".traj"])
    assert found == [str(tmp_path / "a" / "1.traj"), str(tmp_path / "b" / "2.traj")]
    with pytest.raises(ArtifactError):
        FileManager.find_files(str(tmp_path / "missing"))


def test_sha256_of_missing_file(tmp_path):
    with pytest.raises(ArtifactError):
        FileManager.sha256_file(str(tmp_path / "none.bin"))

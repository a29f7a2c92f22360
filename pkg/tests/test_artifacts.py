import json
import os

import numpy as np
import pytest
from tenacity import wait_none

from core.helpers import artifacts


class TestWriteJson:
    def test_sorted_and_numpy_aware(self, tmp_path):
        path = artifacts.write_json(str(tmp_path / "m.json"), {"b": np.float64(1.5), "a": np.arange(3)})
        text = open(path).read()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [0, 1, 2], "b": 1.5}
        assert not os.path.exists(path + ".tmp")

    def test_retries_transient_os_errors(self, tmp_path, mocker):
        real_replace = os.replace
        calls = {"n": 0}

        def flaky(src, dst):
            calls["n"] += 1
            if calls["n"] == 1:
                raise OSError("device busy")
            return real_replace(src, dst)

        mocker.patch("core.helpers.artifacts.os.replace", side_effect=flaky)
        path = artifacts.write_json.retry_with(wait=wait_none())(str(tmp_path / "m.json"), {"x": 1})
        assert calls["n"] == 2
        assert json.loads(open(path).read()) == {"x": 1}

    def test_gives_up_after_three_attempts(self, tmp_path, mocker):
        replace = mocker.patch("core.helpers.artifacts.os.replace", side_effect=OSError("read-only"))
        with pytest.raises(OSError, match="read-only"):
            artifacts.write_json.retry_with(wait=wait_none())(str(tmp_path / "m.json"), {})
        assert replace.call_count == 3

    def test_unserialisable_is_not_retried(self, tmp_path):
        with pytest.raises(TypeError):
            artifacts.write_json(str(tmp_path / "m.json"), {"x": object()})


class TestManifest:
    def test_missing_is_none(self, tmp_path):
        assert artifacts.read_manifest(str(tmp_path)) is None

    def test_corrupt_is_none(self, tmp_path, caplog):
        (tmp_path / artifacts.MANIFEST).write_text("{not json")
        assert artifacts.read_manifest(str(tmp_path)) is None
        assert "unreadable manifest" in caplog.text


class TestMetrics:
    def test_round_trip(self, tmp_path):
        path = artifacts.write_metrics(str(tmp_path / artifacts.METRICS), [0, 1, 2], [0.1, 0.2, 1 / 3], [1.0, 0.5, 0.25], [False, True, False])
        rows = artifacts.read_metrics(path)
        assert [r["step"] for r in rows] == [0, 1, 2]
        assert rows[2]["rmse"] == 1 / 3
        assert [r["is_measurement_step"] for r in rows] == [False, True, False]
        assert open(path).readline().strip() == ",".join(artifacts.METRICS_COLUMNS)

    def test_identical_bytes_for_identical_input(self, tmp_path):
        args = ([0, 1], np.array([0.1, 0.7]), np.array([0.3, 0.2]), [False, True])
        a = artifacts.write_metrics(str(tmp_path / "a.csv"), *args)
        b = artifacts.write_metrics(str(tmp_path / "b.csv"), *args)
        assert open(a, "rb").read() == open(b, "rb").read()


class TestStates:
    def test_header_and_values(self, tmp_path):
        states = np.array([[1.0, 2.0], [3.0, 4.5]])
        path = artifacts.write_states(str(tmp_path / "s.csv"), [0, 5], states)
        assert open(path).readline().strip() == "step,x_1,x_2"
        steps, loaded = artifacts.read_states(path)
        assert steps == [0, 5]
        np.testing.assert_array_equal(loaded, states)


def test_code_version_falls_back(mocker):
    mocker.patch("core.helpers.artifacts.version", side_effect=artifacts.PackageNotFoundError)
    assert artifacts.code_version() == "0.1.0"

import builtins
import errno
import json
import os
import tempfile
from unittest import mock

from django.test import SimpleTestCase

from dynamics.helper import flatten_dotted, format_float, json_float_array
from dynamics.services import outputs
from dynamics.services.outputs import ExperimentResult, Table, sha256_file, write_csv, write_outputs


def _sample_result(value=0.1):
    return ExperimentResult(
        experiment="circuit_check",
        tables={"series.csv": Table(["t", "sx1", "ok"], [[0, value, True], [1, 1 / 3, False]])},
        jsonl={"trajectories.jsonl": ['{"seed": 0}', '{"seed": 1}']},
        metadata={"wall_time_s": 1.5},
    )


class HelperTests(SimpleTestCase):
    def test_format_float_round_trips(self):
        self.assertEqual(format_float(0.1), "0.10000000000000001")
        self.assertEqual(float(format_float(1 / 3)), 1 / 3)
        self.assertEqual(format_float(2), "2")

    def test_json_float_array(self):
        self.assertEqual(json_float_array([[1, 0.5], [2]]), "[[1, 0.5], [2]]")
        self.assertEqual(json.loads(json_float_array([0.1, 0.2])), [0.1, 0.2])

    def test_flatten_dotted(self):
        flat = flatten_dotted({"model": {"h_i": 0.5, "L": [4, 3]}, "seed": 1})
        self.assertEqual(flat, {"model.h_i": 0.5, "model.L": [4, 3], "seed": 1})


class WriteCsvTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = os.path.join(self.tmp.name, "table.csv")

    def test_format(self):
        write_csv(self.path, Table(["step", "value", "flag"], [[3, 0.1, True], [4, -2.5, False]]))
        with open(self.path, "rb") as fh:
            content = fh.read().decode("utf-8")
        self.assertEqual(content, "step,value,flag\n3,0.10000000000000001,true\n4,-2.5,false\n")

    def test_row_length_checked(self):
        with self.assertRaises(ValueError):
            write_csv(self.path, Table(["a", "b"], [[1]]))

    @mock.patch("tenacity.nap.time.sleep", return_value=None)
    def test_transient_error_is_retried(self, _sleep):
        real_open = builtins.open
        calls = {"n": 0}

        def flaky_open(path, *args, **kwargs):
            if path == self.path and calls["n"] == 0:
                calls["n"] += 1
                raise OSError(errno.EBUSY, "busy")
            return real_open(path, *args, **kwargs)

        with mock.patch("builtins.open", side_effect=flaky_open):
            write_csv(self.path, Table(["a"], [[1]]))
        self.assertEqual(calls["n"], 1)
        with open(self.path, encoding="utf-8") as fh:
            self.assertEqual(fh.read(), "a\n1\n")

    def test_permanent_error_is_not_retried(self):
        missing = os.path.join(self.tmp.name, "no-such-dir", "table.csv")
        with self.assertRaises(FileNotFoundError):
            write_csv(missing, Table(["a"], []))


class WriteOutputsTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def _read_manifest(self, out_dir):
        with open(os.path.join(out_dir, outputs.MANIFEST_FILE), encoding="utf-8") as fh:
            return json.load(fh)

    def test_manifest_lists_every_file_once(self):
        out_dir = os.path.join(self.tmp.name, "run")
        entries = write_outputs(_sample_result(), out_dir)
        names = [e["file"] for e in entries]
        self.assertEqual(names, ["metadata.json", "series.csv", "trajectories.jsonl"])
        manifest = self._read_manifest(out_dir)
        self.assertEqual(manifest["experiment"], "circuit_check")
        self.assertEqual(manifest["files"], entries)

        by_name = {e["file"]: e for e in entries}
        self.assertIsNone(by_name["metadata.json"]["sha256"])
        self.assertFalse(by_name["metadata.json"]["deterministic"])
        series = os.path.join(out_dir, "series.csv")
        self.assertEqual(by_name["series.csv"]["sha256"], sha256_file(series))
        self.assertEqual(by_name["series.csv"]["bytes"], os.path.getsize(series))

    def test_jsonl_lines(self):
        out_dir = os.path.join(self.tmp.name, "run")
        write_outputs(_sample_result(), out_dir)
        with open(os.path.join(out_dir, "trajectories.jsonl"), encoding="utf-8") as fh:
            self.assertEqual(fh.read(), '{"seed": 0}\n{"seed": 1}\n')

    def test_same_result_same_manifest(self):
        a, b = os.path.join(self.tmp.name, "a"), os.path.join(self.tmp.name, "b")
        first = _sample_result()
        second = _sample_result()
        second.metadata["wall_time_s"] = 9.0
        write_outputs(first, a)
        write_outputs(second, b)
        self.assertEqual(self._read_manifest(a), self._read_manifest(b))

    def test_different_values_change_hash(self):
        a = write_outputs(_sample_result(0.1), os.path.join(self.tmp.name, "a"))
        b = write_outputs(_sample_result(0.2), os.path.join(self.tmp.name, "b"))
        self.assertNotEqual(a[1]["sha256"], b[1]["sha256"])

    def test_duplicate_names_rejected(self):
        result = _sample_result()
        result.jsonl["series.csv"] = ["{}"]
        with self.assertRaises(ValueError):
            write_outputs(result, os.path.join(self.tmp.name, "dup"))

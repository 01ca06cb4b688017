import json
import unittest

from qerl.errors import IOFailure, ParseError
from qerl.files import (
    JsonlAppender,
    csv_text,
    iter_lines,
    read_csv,
    read_json,
    write_csv,
    write_json_atomic,
    write_text_atomic,
)

from tests.base_test_classes import BaseTestClass
from tests.test_helpers import temporary_test_directory


class TestAtomicWrites(BaseTestClass):
    def test_write_creates_parent_and_leaves_no_temporary(self) -> None:
        with temporary_test_directory() as tmp:
            target = tmp / "nested" / "out.txt"
            write_text_atomic(target, "hello")
            self.assertEqual(target.read_text(encoding="utf8"), "hello")
            self.assertFalse((tmp / "nested" / "out.txt.tmp").exists())

    def test_write_replaces_existing_content(self) -> None:
        with temporary_test_directory() as tmp:
            target = tmp / "out.json"
            write_json_atomic(target, {"a": 1})
            write_json_atomic(target, {"b": 2})
            self.assertEqual(read_json(target), {"b": 2})

    def test_json_is_key_sorted(self) -> None:
        with temporary_test_directory() as tmp:
            write_json_atomic(tmp / "x.json", {"b": 1, "a": 2})
            text = (tmp / "x.json").read_text(encoding="utf8")
            self.assertLess(text.index('"a"'), text.index('"b"'))


class TestReading(BaseTestClass):
    def test_missing_file_is_io_failure(self) -> None:
        with temporary_test_directory() as tmp:
            with self.assertRaises(IOFailure):
                read_json(tmp / "absent.json")

    def test_invalid_json_reports_line(self) -> None:
        with temporary_test_directory() as tmp:
            path = tmp / "bad.json"
            path.write_text('{\n  "a": 1,\n  oops\n}\n', encoding="utf8")
            with self.assertRaises(ParseError) as ctx:
                read_json(path, module="config")
            self.assertEqual(ctx.exception.line, 3)
            self.assertEqual(ctx.exception.module, "config")

    def test_iter_lines_skips_blank_lines_and_keeps_numbers(self) -> None:
        with temporary_test_directory() as tmp:
            path = tmp / "lines.txt"
            path.write_text("first\n\n   \nfourth\n", encoding="utf8")
            self.assertEqual(list(iter_lines(path)), [(1, "first"), (4, "fourth")])


class TestCsv(BaseTestClass):
    def test_header_and_cell_formatting(self) -> None:
        text = csv_text(("name", "flag", "value"), [{"name": "x", "flag": True, "value": 0.1}])
        self.assertEqual(text, "name,flag,value\nx,true,0.1\n")

    def test_round_trip_through_reader(self) -> None:
        with temporary_test_directory() as tmp:
            write_csv(tmp / "t.csv", ("a", "b"), [{"a": 1, "b": "q"}, {"a": 2, "b": "r"}])
            rows = read_csv(tmp / "t.csv")
            self.assertEqual([r["a"] for r in rows], ["1", "2"])
            self.assertEqual(rows[1]["b"], "r")

    def test_missing_column_raises(self) -> None:
        with self.assertRaises(KeyError):
            csv_text(("a", "b"), [{"a": 1}])


class TestJsonlAppender(BaseTestClass):
    def test_append_counts_lines(self) -> None:
        with temporary_test_directory() as tmp:
            log = JsonlAppender(tmp / "events.jsonl")
            log.reset()
            log.append([{"i": 0}, {"i": 1}])
            log.append([])
            log.append([{"i": 2}])
            self.assertEqual(log.lines_written, 3)
            lines = (tmp / "events.jsonl").read_text(encoding="utf8").splitlines()
            self.assertEqual([json.loads(line)["i"] for line in lines], [0, 1, 2])

    def test_truncate_rewinds_to_prefix(self) -> None:
        with temporary_test_directory() as tmp:
            log = JsonlAppender(tmp / "events.jsonl")
            log.append({"i": i} for i in range(5))
            log.truncate(2)
            self.assertEqual(log.lines_written, 2)
            log.append([{"i": 9}])
            lines = (tmp / "events.jsonl").read_text(encoding="utf8").splitlines()
            self.assertEqual([json.loads(line)["i"] for line in lines], [0, 1, 9])

    def test_truncate_of_missing_file_creates_empty_log(self) -> None:
        with temporary_test_directory() as tmp:
            log = JsonlAppender(tmp / "fresh.jsonl")
            log.truncate(4)
            self.assertEqual(log.lines_written, 0)
            self.assertEqual((tmp / "fresh.jsonl").read_text(encoding="utf8"), "")


if __name__ == "__main__":
    unittest.main()

import json
import logging

import pytest

from cpft.logging_config import (
    TRACE_LOGGER_NAME,
    LogContext,
    ReadableFormatter,
    StructuredFormatter,
    get_trace_logger,
    setup_logging,
)


def make_record(msg="hello", **extra):
    record = logging.LogRecord("cpft.test", logging.INFO, __file__, 10, msg, None, None)
    record.__dict__.update(extra)
    return record


@pytest.fixture()
def restore_root():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


class TestStructuredFormatter:

    def test_emits_context_fields_and_trace(self):
        out = json.loads(StructuredFormatter().format(
            make_record(run_id="r1", verb="finetune", stage="finetune", trace={"epoch": 2})
        ))
        assert out["message"] == "hello"
        assert out["run_id"] == "r1"
        assert out["verb"] == "finetune"
        assert out["trace"] == {"epoch": 2}

    def test_omits_absent_context(self):
        out = json.loads(StructuredFormatter().format(make_record()))
        assert "run_id" not in out
        assert "trace" not in out

    def test_never_raises_on_bad_message(self):
        record = make_record(msg="%d items")
        record.args = ("not a number",)
        out = json.loads(StructuredFormatter().format(record))
        assert out["formatter_error"] is True

    def test_readable_format(self):
        line = ReadableFormatter().format(make_record())
        assert "| INFO" in line and line.endswith("hello")


class TestLogContext:

    def test_fields_reach_records_and_are_removed_after(self):
        with LogContext(run_id="r1", stage="pretrain"):
            inside = logging.getLogRecordFactory()("x", logging.INFO, "", 0, "m", None, None)
        outside = logging.getLogRecordFactory()("x", logging.INFO, "", 0, "m", None, None)
        assert inside.run_id == "r1" and inside.stage == "pretrain"
        assert not hasattr(outside, "run_id")

    def test_nested_contexts_combine_and_unwind(self):
        factory = logging.getLogRecordFactory()
        with LogContext(run_id="r1", stage="outer"):
            with LogContext(stage="inner"):
                record = logging.getLogRecordFactory()("x", logging.INFO, "", 0, "m", None, None)
            after_inner = logging.getLogRecordFactory()("x", logging.INFO, "", 0, "m", None, None)
        assert (record.run_id, record.stage) == ("r1", "inner")
        assert after_inner.stage == "outer"
        assert logging.getLogRecordFactory() is factory


class TestSetupLogging:

    def test_console_only_by_default(self, monkeypatch, restore_root):
        for name in ("LOG_TO_FILE", "ASYNC_LOGGING", "LOG_FORMAT"):
            monkeypatch.delenv(name, raising=False)
        monkeypatch.setenv("LOG_LEVEL", "warning")
        setup_logging()
        root = logging.getLogger()
        assert root.level == logging.WARNING
        assert len(root.handlers) == 1
        assert isinstance(root.handlers[0].formatter, ReadableFormatter)

    def test_file_mode_routes_traces_to_json_file(self, monkeypatch, restore_root, tmp_path):
        monkeypatch.setenv("LOG_TO_FILE", "true")
        monkeypatch.setenv("LOG_DIR", str(tmp_path))
        monkeypatch.setenv("LOG_LEVEL", "INFO")
        monkeypatch.delenv("ASYNC_LOGGING", raising=False)
        setup_logging()

        assert get_trace_logger().name == TRACE_LOGGER_NAME
        get_trace_logger().info("epoch 1", extra={"trace": {"epoch": 1, "ce": 0.5}})
        logging.getLogger("cpft.training").info("not a trace")
        for handler in logging.getLogger().handlers:
            handler.flush()

        lines = (tmp_path / "trace.log").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["trace"] == {"epoch": 1, "ce": 0.5}
        assert "not a trace" in (tmp_path / "cpft.log").read_text(encoding="utf-8")
        assert (tmp_path / "cpft-error.log").read_text(encoding="utf-8") == ""

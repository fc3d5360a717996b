# -*- coding: utf-8 -*-
"""错误分类与单行诊断"""

import os
import subprocess
import sys
import textwrap

import pytest

from mmwloc.core.error_manager import (ClientOutsideRoomError, ConfigError, ErrorManager,
                                       ErrorSeverity, ModelFormatError, UnlocalizableError)


@pytest.fixture
def manager():
    return ErrorManager()


@pytest.mark.parametrize("exception, code", [
    (ClientOutsideRoomError("client (20, 3) is outside the room"), "client_outside"),
    (ModelFormatError("bad shape"), "model_format"),
    (FileNotFoundError(2, "No such file", "data.csv"), "file_not_found"),
    (ValueError("negative"), "user_input"),
    (RuntimeError("boom"), "unknown"),
])
def test_categories(manager, exception, code):
    assert manager.handle_exception(exception).error_code == code


def test_diagnostic_is_single_line(manager):
    info = manager.handle_exception(ConfigError("invalid value\nfor 'runtime.jobs'"))
    assert ErrorManager.format_diagnostic(info) == "error: config: invalid value for 'runtime.jobs'"


def test_missing_file_message(manager):
    info = manager.handle_exception(FileNotFoundError(2, "No such file", "data.csv"))
    assert ErrorManager.format_diagnostic(info) == "error: file_not_found: file not found: data.csv"


def test_context_merged(manager):
    info = manager.handle_exception(UnlocalizableError("too few anchors", sample=4),
                                    context={"operation": "label"})
    assert info.context == {"sample": 4, "operation": "label"}
    assert info.severity is ErrorSeverity.WARNING


def test_statistics_and_signal(manager):
    seen = []
    manager.error_occurred.connect(seen.append)
    manager.handle_exception(ModelFormatError("a"))
    manager.handle_exception(ModelFormatError("b"))
    assert manager.get_error_statistics() == {"model_format": {"error": 2}}
    assert [info.message for info in seen] == ["a", "b"]


def test_error_log_file(manager, tmp_path):
    path = tmp_path / "errors.log"
    manager.set_log_file(str(path))
    manager.handle_exception(ModelFormatError("corrupted weights"))
    assert "[model_format] corrupted weights" in path.read_text(encoding="utf-8")


def test_global_manager_released_before_exit():
    src = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src")
    script = textwrap.dedent("""
        from mmwloc.core.error_manager import ModelFormatError, get_error_manager
        from mmwloc.core.task_manager import run_tasks
        get_error_manager().handle_exception(ModelFormatError("bad"))
        run_tasks([lambda: 1, lambda: 2], jobs=2)
        print("done")
    """)
    env = dict(os.environ, PYTHONPATH=src + os.pathsep + os.environ.get("PYTHONPATH", ""))
    result = subprocess.run([sys.executable, "-c", script], capture_output=True, text=True,
                            env=env, timeout=120)
    assert result.returncode == 0, result.stderr
    assert result.stdout.strip() == "done"
    assert "invalid pointer" not in result.stderr

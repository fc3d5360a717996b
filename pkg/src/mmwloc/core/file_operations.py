# -*- coding: utf-8 -*-
"""
文件操作
所有输出文件都先写入同目录的临时文件，fsync 后再原子替换目标文件
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Union

import pandas as pd

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

# CSV 约定：17 位有效数字保证浮点往返精确，统一 \n 换行
CSV_FLOAT_FORMAT = "%.17g"
CSV_LINE_TERMINATOR = "\n"


def _ensure_parent(path: Path):
    """确保目标目录存在"""
    parent = path.parent
    if str(parent) and not parent.exists():
        parent.mkdir(parents=True, exist_ok=True)


def atomic_write_bytes(path: PathLike, data: bytes) -> str:
    """原子写入字节内容，返回目标路径"""
    target = Path(path)
    _ensure_parent(target)

    fd, temp_path = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp",
                                     dir=str(target.parent) or ".")
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(temp_path, target)
    except BaseException:
        try:
            os.unlink(temp_path)
        except OSError:
            pass
        raise

    logger.debug(f"Wrote {len(data)} bytes to {target}")
    return str(target)


def atomic_write_text(path: PathLike, text: str) -> str:
    """原子写入文本（UTF-8）"""
    return atomic_write_bytes(path, text.encode('utf-8'))


def dumps_json(data: Any) -> str:
    """稳定的 JSON 文本：缩进 2，键保持插入顺序，末尾换行"""
    return json.dumps(data, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def atomic_write_json(path: PathLike, data: Any) -> str:
    """原子写入 JSON"""
    return atomic_write_text(path, dumps_json(data))


def frame_to_csv_text(frame: pd.DataFrame) -> str:
    """按仓库约定把表格序列化为 CSV 文本"""
    return frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT,
                        lineterminator=CSV_LINE_TERMINATOR)


def atomic_write_frame(path: PathLike, frame: pd.DataFrame) -> str:
    """原子写入 CSV 表格"""
    return atomic_write_text(path, frame_to_csv_text(frame))


def read_frame(path: PathLike) -> pd.DataFrame:
    """读取 CSV 表格，浮点按往返精度解析"""
    if not os.path.isfile(path):
        raise FileNotFoundError(2, "No such file", str(path))
    return pd.read_csv(path, float_precision="round_trip")


def read_json(path: PathLike) -> Any:
    """读取 JSON 文件"""
    if not os.path.isfile(path):
        raise FileNotFoundError(2, "No such file", str(path))
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)

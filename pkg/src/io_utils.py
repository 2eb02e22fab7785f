# src/io_utils.py
from __future__ import annotations

import hashlib
import json
import pathlib
from datetime import datetime, timezone
from typing import Any, Iterable

import pandas as pd


def ensure_out_dir(path: str | pathlib.Path) -> pathlib.Path:
    p = pathlib.Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def sha1(s: str | bytes, length: int | None = 10) -> str:
    """내용 확인용 SHA1 해시 (기본 앞 10자리)."""
    data = s.encode("utf-8") if isinstance(s, str) else s
    digest = hashlib.sha1(data).hexdigest()
    return digest[:length] if length else digest


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _write(path: str | pathlib.Path, content: str) -> str:
    path = pathlib.Path(path)
    try:
        ensure_out_dir(path.parent)
        # newline="" → 플랫폼과 무관하게 \n 고정 (바이트 재현성)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(content)
    except OSError as e:
        raise OSError(f"failed to write {path}: {e}") from e
    return str(path)


def write_text(path: str | pathlib.Path, content: str) -> str:
    return _write(path, content)


def write_json(path: str | pathlib.Path, obj: Any) -> str:
    return _write(path, canonical_json(obj))


def write_jsonl(path: str | pathlib.Path, rows: Iterable[dict]) -> str:
    lines = [json.dumps(r, sort_keys=True, ensure_ascii=False, separators=(",", ":")) for r in rows]
    return _write(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: str | pathlib.Path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_csv(frame: pd.DataFrame, path: str | pathlib.Path) -> str:
    return _write(path, frame.to_csv(index=False, lineterminator="\n"))


def read_csv(path: str | pathlib.Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise
    except OSError as e:
        raise OSError(f"failed to read {path}: {e}") from e

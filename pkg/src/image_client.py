# src/image_client.py
from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Protocol

from rich import print

from .config import TEMPLATE_PATH
from .errors import ConfigError
from .io_utils import sha1

IMAGE_MODEL = "gpt-image-1"
IMAGE_SIZE = "1024x1024"
IMAGE_FORMAT = "png"

_SLOTS = ("{roof_style}", "{shingle_color}", "{surface}", "{edge}", "{extra}")


def load_prompt(path: str | os.PathLike | None = None, quiet: bool = False) -> str:
    """프롬프트 템플릿을 읽어 반환 (슬롯 5개 검증)."""
    path = os.path.abspath(path or TEMPLATE_PATH)
    with open(path, "r", encoding="utf-8") as f:
        template = f.read().strip()
    missing = [s for s in _SLOTS if s not in template]
    if missing:
        raise ConfigError(f"prompt template {path} lacks slots {missing}")
    if not quiet:
        print(f"[blue]🧭 Using prompt:[/blue] {path}")
        print(f"[blue]🧾 prompt sha1:[/blue] {sha1(template)}")
    return template


def template_sha1(template: str) -> str:
    return sha1(template, length=None)


def make_filename(policy_id: str) -> str:
    safe = policy_id.replace("/", "_")
    return f"{safe}.{IMAGE_FORMAT}"


class ImageClient(Protocol):
    def submit(self, prompt: str, size: str, destination: Path) -> Path: ...


class NoopImageClient:
    """이미지 API를 호출하지 않음. 저장될 경로만 돌려줌."""

    def __init__(self):
        self.requests: list[tuple[str, str, Path]] = []

    def submit(self, prompt: str, size: str, destination: Path) -> Path:
        self.requests.append((prompt, size, destination))
        return destination


def render_images(manifest_rows: Iterable[dict], client: ImageClient, out_dir: str | Path) -> list[Path]:
    """프롬프트 매니페스트를 클라이언트에 순서대로 제출."""
    out_dir = Path(out_dir)
    return [
        client.submit(row["prompt"], IMAGE_SIZE, out_dir / make_filename(row["policy_id"]))
        for row in manifest_rows
    ]

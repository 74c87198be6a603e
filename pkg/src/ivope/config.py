"""Reader for the line-oriented ``key = value`` format with ``[section]`` headers.

Blank lines and lines starting with ``#`` or ``;`` are ignored. Keys are
case-sensitive; a key may appear once per section.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import SpecError


@dataclass(frozen=True)
class Entry:
    value: str
    line: int


def parse_sections(text: str, source: str = "<string>") -> dict[str, dict[str, Entry]]:
    sections: dict[str, dict[str, Entry]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise SpecError(f"{source}:{lineno}: malformed section header {raw!r}")
            current = line[1:-1].strip()
            if current in sections:
                raise SpecError(f"{source}:{lineno}: duplicate section [{current}]")
            sections[current] = {}
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise SpecError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise SpecError(f"{source}:{lineno}: key {key!r} appears before any [section]")
        if key in sections[current]:
            raise SpecError(f"{source}:{lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = Entry(value, lineno)
    return sections


def read_sections(path) -> dict[str, dict[str, Entry]]:
    path = Path(path)
    if not path.is_file():
        raise SpecError(f"{path}: no such file")
    return parse_sections(path.read_text(encoding="utf-8"), str(path))


def floats(entry: Entry, source: str = "") -> list[float]:
    try:
        return [float(v) for v in entry.value.split(",") if v.strip()]
    except ValueError:
        raise SpecError(f"{source}:{entry.line}: expected comma-separated numbers, got {entry.value!r}") from None

"""Prompt template loading and placeholder rendering.

Templates are plain UTF-8 files with ``{{NAME}}`` placeholders. The packaged
defaults can be overridden wholesale by pointing a TemplateSet at any
directory containing files with the same names.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

_PLACEHOLDER_RE = re.compile(r"\{\{([A-Z_][A-Z0-9_]*)\}\}")


class TemplateError(Exception):
    pass


class TemplateSet:
    def __init__(self, directory: str | Path | None = None) -> None:
        self.directory = Path(directory) if directory is not None else None
        self._cache: dict[str, str] = {}

    def load(self, name: str) -> str:
        if name in self._cache:
            return self._cache[name]
        if self.directory is not None:
            path = self.directory / f"{name}.txt"
            if not path.is_file():
                raise TemplateError(f"template {name!r} not found in {self.directory}")
            text = path.read_text("utf-8")
        else:
            ref = resources.files("showtable") / "templates" / f"{name}.txt"
            if not ref.is_file():
                raise TemplateError(f"packaged template {name!r} not found")
            text = ref.read_text("utf-8")
        self._cache[name] = text
        return text

    def render(self, name: str, **values: object) -> str:
        """Substitute every {{PLACEHOLDER}}; a placeholder without a supplied
        value is an error (unused extra values are fine)."""
        text = self.load(name)
        missing: list[str] = []

        def _sub(match: re.Match) -> str:
            key = match.group(1)
            if key not in values:
                missing.append(key)
                return match.group(0)
            return str(values[key])

        rendered = _PLACEHOLDER_RE.sub(_sub, text)
        if missing:
            raise TemplateError(f"template {name!r} missing values for: {sorted(set(missing))}")
        return rendered

    def source_id(self) -> str:
        return str(self.directory) if self.directory is not None else "packaged"

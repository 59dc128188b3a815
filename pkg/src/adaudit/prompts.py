"""Plain-text prompt templates with named ``{placeholder}`` fields.

A template may contain one repeated block delimited by lines reading
``[[each]]`` and ``[[end]]``; the block is rendered once per item.
Substitution is a single pass, so braces inside substituted values are
never interpreted.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

_FIELD = re.compile(r"\{([A-Za-z_][A-Za-z0-9_()]*)\}")
_EACH = "[[each]]"
_END = "[[end]]"

TEMPLATE_IDS = ("features", "session", "user_sequential", "user_shuffled", "user_au")


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class Template:
    template_id: str
    head: str
    block: str | None
    tail: str

    @property
    def text(self) -> str:
        if self.block is None:
            return self.head
        return f"{self.head}{_EACH}\n{self.block}{_END}\n{self.tail}"

    def fields(self) -> set[str]:
        parts = [self.head, self.tail, self.block or ""]
        return {m.group(1) for p in parts for m in _FIELD.finditer(p)}

    def render(self, values: dict | None = None, items=None) -> str:
        values = values or {}
        out = [_sub(self.head, values, self.template_id)]
        if self.block is not None:
            for item in items or ():
                out.append(_sub(self.block, {**values, **item}, self.template_id))
        elif items:
            raise TemplateError(f"template {self.template_id!r} has no repeated block")
        out.append(_sub(self.tail, values, self.template_id))
        return "".join(out)


def _sub(text: str, values: dict, template_id: str) -> str:
    missing = sorted({m.group(1) for m in _FIELD.finditer(text)} - values.keys())
    if missing:
        raise TemplateError(f"template {template_id!r}: unresolved placeholder(s) {missing}")
    return _FIELD.sub(lambda m: str(values[m.group(1)]), text)


def parse_template(template_id: str, text: str) -> Template:
    lines = text.splitlines(keepends=True)
    starts = [i for i, ln in enumerate(lines) if ln.strip() == _EACH]
    ends = [i for i, ln in enumerate(lines) if ln.strip() == _END]
    if not starts and not ends:
        return Template(template_id, text, None, "")
    if len(starts) != 1 or len(ends) != 1 or ends[0] < starts[0]:
        raise TemplateError(f"template {template_id!r}: malformed [[each]]/[[end]] block")
    s, e = starts[0], ends[0]
    return Template(template_id, "".join(lines[:s]), "".join(lines[s + 1:e]), "".join(lines[e + 1:]))


def load_template(template_id: str, directory=None) -> Template:
    """Load ``<template_id>.txt`` from ``directory`` or the bundled set."""
    if directory is not None:
        text = (Path(directory) / f"{template_id}.txt").read_text(encoding="utf-8")
    else:
        text = resources.files("adaudit").joinpath("data", "prompts", f"{template_id}.txt").read_text(
            encoding="utf-8"
        )
    return parse_template(template_id, text)

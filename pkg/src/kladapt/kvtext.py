"""Line-oriented ``key = value`` text with nested ``name { ... }`` sections.

Used for model files, controller files and scenario presets.  Values are
kept as strings; a value whose parentheses are unbalanced continues on the
following lines, so long S-expressions can be wrapped.  Entries inside a
line may also be separated by commas at parenthesis depth zero.
"""

from __future__ import annotations

import re

_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*(\[[0-9]+\])*$")


class KVError(ValueError):
    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line else msg)


class Section(dict):
    """Ordered mapping of keys to strings or nested Sections."""

    def __init__(self, name=""):
        super().__init__()
        self.name = name

    def need(self, key):
        if key not in self:
            where = f" in section '{self.name}'" if self.name else ""
            raise KVError(f"missing field '{key}'{where}")
        return self[key]

    def get_float(self, key, default=None):
        if key not in self:
            if default is None:
                self.need(key)
            return default
        try:
            return float(self[key])
        except (TypeError, ValueError):
            raise KVError(f"field '{key}' must be a number, got {self[key]!r}") from None

    def get_int(self, key, default=None):
        v = self.get_float(key, default)
        if v is None or float(v) != int(v):
            raise KVError(f"field '{key}' must be an integer")
        return int(v)

    def get_list(self, key, default=None, cast=str):
        if key not in self:
            if default is None:
                self.need(key)
            return list(default)
        return [cast(v) if cast is not str else v for v in parse_list(self[key], key)]

    def get_floats(self, key, default=None):
        try:
            return self.get_list(key, default, float)
        except ValueError as exc:
            if isinstance(exc, KVError):
                raise
            raise KVError(f"field '{key}' must be a list of numbers") from None

    def section(self, key, required=True):
        v = self.get(key)
        if v is None:
            if required:
                self.need(key)
            return Section(key)
        if not isinstance(v, Section):
            raise KVError(f"field '{key}' must be a section")
        return v

    def indexed(self, base):
        """Collect ``base[i]`` (or ``base[i][j]``) keys into {index tuple: value}."""
        out = {}
        for k, v in self.items():
            if k.startswith(base + "["):
                idx = tuple(int(t) for t in re.findall(r"\[([0-9]+)\]", k))
                out[idx] = v
        return out


def parse_list(text: str, key: str = "") -> list[str]:
    t = text.strip()
    if not (t.startswith("[") and t.endswith("]")):
        raise KVError(f"field '{key}' must be a list like [a, b]")
    inner = t[1:-1].strip()
    if not inner:
        return []
    return [item.strip() for item in _split_top(inner)]


def _split_top(text: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p for p in parts if p.strip()]


def _depth(text: str) -> int:
    return text.count("(") - text.count(")") + text.count("[") - text.count("]")


def loads(text: str) -> Section:
    root = Section()
    stack = [root]
    pending = None  # (key, buffer, start line)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if pending is not None:
            key, buf, start = pending
            buf = buf + " " + line
            if _depth(buf) > 0:
                pending = (key, buf, start)
                continue
            pending = None
            _store(stack[-1], key, buf, start)
            continue
        if not line:
            continue
        if line == "}":
            if len(stack) == 1:
                raise KVError("unmatched '}'", lineno)
            stack.pop()
            continue
        if line.endswith("{") and "=" not in line:
            name = line[:-1].strip()
            if not _KEY_RE.match(name):
                raise KVError(f"bad section name {name!r}", lineno)
            if name in stack[-1]:
                raise KVError(f"duplicate section '{name}'", lineno)
            sec = Section(name)
            stack[-1][name] = sec
            stack.append(sec)
            continue
        closes = line.endswith("}") and _depth(line) >= 0 and line.count("{") < line.count("}")
        if closes:
            line = line[:-1].strip()
        for entry in _split_top(line):
            if "=" not in entry:
                raise KVError(f"expected 'key = value', got {entry.strip()!r}", lineno)
            key, val = entry.split("=", 1)
            key, val = key.strip(), val.strip()
            if not _KEY_RE.match(key):
                raise KVError(f"bad key {key!r}", lineno)
            if _depth(val) > 0:
                pending = (key, val, lineno)
                break
            _store(stack[-1], key, val, lineno)
        if closes:
            if len(stack) == 1:
                raise KVError("unmatched '}'", lineno)
            stack.pop()
    if pending is not None:
        raise KVError(f"unterminated value for '{pending[0]}'", pending[2])
    if len(stack) != 1:
        raise KVError(f"section '{stack[-1].name}' is not closed")
    return root


def _store(sec: Section, key: str, val: str, lineno: int) -> None:
    if _depth(val) != 0:
        raise KVError(f"unbalanced brackets in '{key}'", lineno)
    if key in sec:
        raise KVError(f"duplicate key '{key}'", lineno)
    sec[key] = val


def load(path) -> Section:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(sec: Section | dict, indent: str = "") -> str:
    lines = []
    for k, v in sec.items():
        if isinstance(v, dict):
            lines.append(f"{indent}{k} {{")
            lines.append(dumps(v, indent + "  ").rstrip("\n"))
            lines.append(f"{indent}}}")
        elif isinstance(v, (list, tuple)):
            lines.append(f"{indent}{k} = [{', '.join(format_value(e) for e in v)}]")
        else:
            lines.append(f"{indent}{k} = {format_value(v)}")
    return "\n".join(line for line in lines if line) + "\n"


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)

"""Dataset containers and JSON Lines I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    text: str
    label: int | None = None


@dataclass
class Dataset:
    examples: list[Example]
    n_classes: int
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, ex in enumerate(self.examples):
            if not ex.text.strip():
                raise DataError(f"{self.name}: example {i} has empty text")
            if ex.label is not None and not 0 <= ex.label < self.n_classes:
                raise DataError(f"{self.name}: example {i} label {ex.label} outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def texts(self) -> list[str]:
        return [e.text for e in self.examples]

    @property
    def labels(self) -> list[int]:
        return [e.label for e in self.examples]

    def subset(self, idx: Iterable[int], name: str | None = None) -> "Dataset":
        return Dataset([self.examples[i] for i in idx], self.n_classes,
                       self.name if name is None else name)

    def class_counts(self) -> list[int]:
        counts = [0] * self.n_classes
        for e in self.examples:
            if e.label is not None:
                counts[e.label] += 1
        return counts


def load_jsonl(path, n_classes: int, name: str | None = None) -> Dataset:
    """Read ``{"text": ..., "label": ...}`` lines; blank lines are skipped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    examples = []
    raw = path.read_bytes().decode("utf-8")
    for lineno, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
            raise DataError(f"{path}:{lineno}: expected an object with a string 'text' field")
        label = obj.get("label")
        if label is not None:
            if not isinstance(label, int) or not 0 <= label < n_classes:
                raise DataError(f"{path}:{lineno}: label {label!r} outside [0, {n_classes})")
        if not obj["text"].strip():
            raise DataError(f"{path}:{lineno}: empty text")
        examples.append(Example(obj["text"], label))
    return Dataset(examples, n_classes, name or path.stem)


def save_jsonl(path, rows: Sequence[Example] | Dataset | Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for r in rows:
            if isinstance(r, Example):
                r = {"text": r.text} if r.label is None else {"text": r.text, "label": r.label}
            f.write(json.dumps(r, sort_keys=True) + "\n")

"""Symptom taxonomy: 16 note-level categories mapped to PHQ questions.

The canonical definitions live in ``data/taxonomy.toml`` so phrasings and
baseline keywords can be edited without code changes. Loaded objects are
immutable and cached.
"""

from __future__ import annotations

import tomllib
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

PHQ_QUESTIONS = tuple(f"Q{i}" for i in range(1, 10))
DIRECTIONS = ("increase", "decrease", "both", "n/a")
N_CATEGORIES = 16


class UnknownCategoryError(KeyError):
    pass


@dataclass(frozen=True)
class SymptomCategory:
    category_id: str
    display_name: str
    phq_question: str
    direction: str
    bdi_items: tuple[int, ...]
    chat_query: str
    hypothesis: str
    keywords: tuple[frozenset[str], ...]  # note matches if all words of any one set occur

    def __post_init__(self):
        if self.phq_question not in PHQ_QUESTIONS:
            raise ValueError(f"bad phq_question {self.phq_question!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"bad direction {self.direction!r}")
        if not all(1 <= i <= 21 for i in self.bdi_items):
            raise ValueError("bdi_items out of range")
        if not self.keywords or any(not s for s in self.keywords):
            raise ValueError("keywords must be >=1 non-empty word set")


def _category_from_table(row: dict) -> SymptomCategory:
    return SymptomCategory(
        category_id=row["category_id"],
        display_name=row["display_name"],
        phq_question=row["phq_question"],
        direction=row["direction"],
        bdi_items=tuple(row["bdi_items"]),
        chat_query=row["chat_query"],
        hypothesis=row["hypothesis"],
        keywords=tuple(frozenset(w.lower() for w in ws) for ws in row["keywords"]),
    )


def parse_taxonomy(text: str) -> tuple[SymptomCategory, ...]:
    data = tomllib.loads(text)
    cats = tuple(_category_from_table(row) for row in data["category"])
    ids = [c.category_id for c in cats]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate category_ids")
    if len(cats) != N_CATEGORIES:
        raise ValueError(f"expected {N_CATEGORIES} categories, got {len(cats)}")
    return cats


def serialize_taxonomy(cats: tuple[SymptomCategory, ...]) -> str:
    """Emit the taxonomy back to its TOML data format (round-trippable)."""
    chunks = []
    for c in cats:
        lines = ["[[category]]"]
        lines.append(f'category_id = "{c.category_id}"')
        lines.append(f'display_name = "{c.display_name}"')
        lines.append(f'phq_question = "{c.phq_question}"')
        lines.append(f'direction = "{c.direction}"')
        lines.append(f"bdi_items = [{', '.join(str(i) for i in c.bdi_items)}]")
        lines.append(f'chat_query = "{_toml_escape(c.chat_query)}"')
        lines.append(f'hypothesis = "{_toml_escape(c.hypothesis)}"')
        sets = ", ".join("[" + ", ".join(f'"{w}"' for w in sorted(ws)) + "]" for ws in c.keywords)
        lines.append(f"keywords = [{sets}]")
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"


def _toml_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


@lru_cache(maxsize=1)
def taxonomy() -> tuple[SymptomCategory, ...]:
    """The canonical ordered 16-category taxonomy."""
    text = resources.files("symscreen.data").joinpath("taxonomy.toml").read_text("utf-8")
    return parse_taxonomy(text)


@lru_cache(maxsize=1)
def _by_id() -> dict[str, SymptomCategory]:
    return {c.category_id: c for c in taxonomy()}


def category(category_id: str) -> SymptomCategory:
    try:
        return _by_id()[category_id]
    except KeyError:
        raise UnknownCategoryError(f"unknown category_id: {category_id!r}") from None


def keywords_for(category_id: str) -> tuple[frozenset[str], ...]:
    return category(category_id).keywords


def category_ids() -> tuple[str, ...]:
    return tuple(c.category_id for c in taxonomy())

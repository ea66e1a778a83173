"""Synthetic product catalog: grammar-driven titles plus a synonym table.

Titles are ``brand modifier category`` compositions of pseudo-words. A fraction
of the grammar tokens receive an alias that never appears in any title, which
creates the lexical gap query rewriting has to bridge.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")

SLOTS = ("brand", "modifier", "category")


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Product:
    id: int
    title: str
    tokens: tuple[str, ...]
    attributes: dict[str, str] = field(hash=False, compare=True)


@dataclass(frozen=True)
class CatalogConfig:
    n_brands: int = 8
    n_modifiers: int = 6
    n_categories: int = 10
    synonym_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_brands, self.n_modifiers, self.n_categories) < 1:
            raise ValueError("empty grammar")
        if not 0.0 <= self.synonym_fraction <= 1.0:
            raise ValueError("synonym_fraction must lie in [0, 1]")


@dataclass
class Catalog:
    products: list[Product]
    synonym_table: dict[str, frozenset[str]]
    seed: int
    slot_tokens: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.products)

    def __getitem__(self, product_id: int) -> Product:
        return self.products[product_id]

    def synonyms(self, token: str) -> frozenset[str]:
        return self.synonym_table.get(token, frozenset())

    def title_vocabulary(self) -> list[str]:
        return sorted({tok for p in self.products for tok in p.tokens})

    def vocabulary(self) -> list[str]:
        """Every surface token the catalog knows about: title tokens and aliases."""
        words = set(self.title_vocabulary())
        for tok, syns in self.synonym_table.items():
            words.add(tok)
            words.update(syns)
        return sorted(words)

    def slot_of(self, token: str) -> str | None:
        for slot, toks in self.slot_tokens.items():
            if token in toks:
                return slot
        return None

    # -- serialization -------------------------------------------------
    def to_lines(self) -> list[str]:
        return [
            f"{p.id}\t{p.title}\t{json.dumps(p.attributes, sort_keys=True)}"
            for p in sorted(self.products, key=lambda p: p.id)
        ]

    def synonym_lines(self) -> list[str]:
        return [
            f"{tok}\t{syn}"
            for tok in sorted(self.synonym_table)
            for syn in sorted(self.synonym_table[tok])
        ]

    def save(self, catalog_path: str | Path, synonym_path: str | Path) -> None:
        _write_lines(catalog_path, self.to_lines())
        _write_lines(synonym_path, self.synonym_lines())

    @classmethod
    def load(cls, catalog_path: str | Path, synonym_path: str | Path, seed: int = 0) -> "Catalog":
        products = []
        # ids enumerate the grammar, so first appearance recovers generation order
        slots: dict[str, dict[str, None]] = {s: {} for s in SLOTS}
        for line in _read_lines(catalog_path):
            pid, title, attrs = line.split("\t")
            attributes = json.loads(attrs)
            for slot, value in attributes.items():
                slots.setdefault(slot, {})[value] = None
            products.append(Product(int(pid), title, tuple(tokenize(title)), attributes))
        table: dict[str, set[str]] = {}
        for line in _read_lines(synonym_path):
            tok, syn = line.split("\t")
            table.setdefault(tok, set()).add(syn)
        return cls(
            products=products,
            synonym_table={k: frozenset(v) for k, v in table.items()},
            seed=seed,
            slot_tokens={k: tuple(v) for k, v in slots.items()},
        )


def _write_lines(path: str | Path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _read_lines(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def _pseudo_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    words: list[str] = []
    n_syllables = 2
    attempts = 0
    while len(words) < count:
        word = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(n_syllables)
        )
        if word not in taken:
            taken.add(word)
            words.append(word)
        attempts += 1
        if attempts > 50 * count:
            n_syllables += 1
            attempts = 0
    return words


def generate_catalog(config: CatalogConfig) -> Catalog:
    """Build the full brand x category x modifier catalog for ``config``.

    Product ids enumerate brands, then categories, then modifiers. Synonym
    aliases are assigned to ``round(synonym_fraction * n_tokens)`` grammar
    tokens chosen by the seeded generator; the relation is stored both ways.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    taken: set[str] = set()
    brands = _pseudo_words(rng, config.n_brands, taken)
    modifiers = _pseudo_words(rng, config.n_modifiers, taken)
    categories = _pseudo_words(rng, config.n_categories, taken)

    products = []
    for brand in brands:
        for category in categories:
            for modifier in modifiers:
                title = f"{brand} {modifier} {category}"
                products.append(
                    Product(
                        id=len(products),
                        title=title,
                        tokens=tuple(tokenize(title)),
                        attributes={"brand": brand, "category": category, "modifier": modifier},
                    )
                )

    grammar = brands + modifiers + categories
    n_alias = int(round(config.synonym_fraction * len(grammar)))
    chosen = sorted(rng.choice(len(grammar), size=n_alias, replace=False).tolist()) if n_alias else []
    aliases = _pseudo_words(rng, n_alias, taken)
    table: dict[str, set[str]] = {}
    for idx, alias in zip(chosen, aliases):
        token = grammar[idx]
        table.setdefault(token, set()).add(alias)
        table.setdefault(alias, set()).add(token)

    return Catalog(
        products=products,
        synonym_table={k: frozenset(v) for k, v in sorted(table.items())},
        seed=config.seed,
        slot_tokens={"brand": tuple(brands), "modifier": tuple(modifiers), "category": tuple(categories)},
    )

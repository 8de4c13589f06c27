"""Concept knowledge base: typed dictionary entries and semantic-type grouping.

The knowledge base is a flat list of concepts, each carrying a CUI, one or
more surface terms with language codes, and one or more semantic-type codes
(TUIs). TUIs are grouped into the three entity classes used throughout the
pipeline (procedures, drugs, diseases).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator

CUI_PATTERN = re.compile(r"^C[0-9]{7}$")
TUI_PATTERN = re.compile(r"^T[0-9]{3}$")


class KBFormatError(ValueError):
    """Malformed knowledge-base or semantic-group file."""


class EntityClass(Enum):
    PROCEDURE = "Procedure"
    DRUG = "Drug"
    DISEASE = "Disease"

    def __str__(self) -> str:
        return self.value


#: TUI -> entity class for the 20 semantic types the pipeline extracts.
DEFAULT_SEMANTIC_GROUPS: dict[str, EntityClass] = {
    # procedures
    "T058": EntityClass.PROCEDURE,  # Health Care Activity
    "T059": EntityClass.PROCEDURE,  # Laboratory Procedure
    "T060": EntityClass.PROCEDURE,  # Diagnostic Procedure
    "T061": EntityClass.PROCEDURE,  # Therapeutic or Preventive Procedure
    # drugs
    "T121": EntityClass.DRUG,  # Pharmacologic Substance
    "T122": EntityClass.DRUG,  # Biomedical or Dental Material
    "T195": EntityClass.DRUG,  # Antibiotic
    "T200": EntityClass.DRUG,  # Clinical Drug
    # diseases
    "T019": EntityClass.DISEASE,  # Congenital Abnormality
    "T020": EntityClass.DISEASE,  # Acquired Abnormality
    "T033": EntityClass.DISEASE,  # Finding
    "T037": EntityClass.DISEASE,  # Injury or Poisoning
    "T046": EntityClass.DISEASE,  # Pathologic Function
    "T047": EntityClass.DISEASE,  # Disease or Syndrome
    "T048": EntityClass.DISEASE,  # Mental or Behavioral Dysfunction
    "T049": EntityClass.DISEASE,  # Cell or Molecular Dysfunction
    "T050": EntityClass.DISEASE,  # Experimental Model of Disease
    "T184": EntityClass.DISEASE,  # Sign or Symptom
    "T190": EntityClass.DISEASE,  # Anatomical Abnormality
    "T191": EntityClass.DISEASE,  # Neoplastic Process
}


@dataclass(frozen=True)
class Concept:
    """One knowledge-base entry.

    terms holds (surface, language) pairs in file order; tuis is the set of
    semantic-type codes attached to the concept.
    """

    cui: str
    terms: tuple[tuple[str, str], ...]
    tuis: frozenset[str]


@dataclass(frozen=True)
class KnowledgeBase:
    concepts: dict[str, Concept]

    def __len__(self) -> int:
        return len(self.concepts)

    def __getitem__(self, cui: str) -> Concept:
        return self.concepts[cui]

    def iter_terms(self, language: str | None = None) -> Iterator[tuple[str, str, Concept]]:
        """Yield (surface, language, concept), optionally filtered by exact language code."""
        for cui in sorted(self.concepts):
            concept = self.concepts[cui]
            for surface, lang in concept.terms:
                if language is None or lang == language:
                    yield surface, lang, concept


def load_kb(path: str | Path) -> KnowledgeBase:
    """Load a concept file: one tab-separated (cui, term, lang, tui) row per line.

    A concept with k terms and m TUIs appears as k*m rows; rows sharing a CUI
    are merged and duplicate (cui, term) pairs collapse. Raises KBFormatError
    naming the offending line for malformed rows, and for an empty file.
    """
    path = Path(path)
    terms_by_cui: dict[str, dict[tuple[str, str], None]] = {}
    tuis_by_cui: dict[str, set[str]] = {}
    rows = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise KBFormatError(f"{path}: line {lineno}: expected 4 tab-separated columns, got {len(cols)}")
            cui, term, lang, tui = cols
            if not CUI_PATTERN.match(cui):
                raise KBFormatError(f"{path}: line {lineno}: bad CUI {cui!r}")
            if not TUI_PATTERN.match(tui):
                raise KBFormatError(f"{path}: line {lineno}: bad TUI {tui!r}")
            term = term.strip()
            if not term:
                raise KBFormatError(f"{path}: line {lineno}: empty term")
            rows += 1
            terms_by_cui.setdefault(cui, {})[(term, lang)] = None
            tuis_by_cui.setdefault(cui, set()).add(tui)
    if rows == 0:
        raise KBFormatError(f"{path}: no concept rows")
    concepts = {
        cui: Concept(cui=cui, terms=tuple(terms_by_cui[cui]), tuis=frozenset(tuis_by_cui[cui]))
        for cui in terms_by_cui
    }
    return KnowledgeBase(concepts=concepts)


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    """Write a knowledge base back out in the 4-column row-per-(term, tui) format."""
    lines = []
    for cui in sorted(kb.concepts):
        concept = kb.concepts[cui]
        for surface, lang in concept.terms:
            for tui in sorted(concept.tuis):
                lines.append(f"{cui}\t{surface}\t{lang}\t{tui}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def class_of(tui: str, groups: dict[str, EntityClass] | None = None) -> EntityClass | None:
    """Entity class of a semantic-type code, or None when unmapped."""
    if groups is None:
        groups = DEFAULT_SEMANTIC_GROUPS
    return groups.get(tui)


def relevant_tuis(entity_class: EntityClass, groups: dict[str, EntityClass] | None = None) -> set[str]:
    """All TUIs mapping to the given class (inverse image under the group map)."""
    if groups is None:
        groups = DEFAULT_SEMANTIC_GROUPS
    return {tui for tui, cls in groups.items() if cls is entity_class}


def mapped_tuis(groups: dict[str, EntityClass] | None = None) -> set[str]:
    """All TUIs covered by the group map."""
    if groups is None:
        groups = DEFAULT_SEMANTIC_GROUPS
    return set(groups)


def load_semantic_groups(path: str | Path) -> dict[str, EntityClass]:
    """Load a TUI -> class file: rows ``TUI\\tClassName``.

    A TUI listed twice with conflicting classes is an error; exact duplicates
    collapse.
    """
    path = Path(path)
    groups: dict[str, EntityClass] = {}
    by_value = {cls.value: cls for cls in EntityClass}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise KBFormatError(f"{path}: line {lineno}: expected 2 tab-separated columns, got {len(cols)}")
            tui, name = cols
            if not TUI_PATTERN.match(tui):
                raise KBFormatError(f"{path}: line {lineno}: bad TUI {tui!r}")
            if name not in by_value:
                raise KBFormatError(f"{path}: line {lineno}: unknown class {name!r}")
            cls = by_value[name]
            if tui in groups and groups[tui] is not cls:
                raise KBFormatError(f"{path}: line {lineno}: {tui} mapped to both {groups[tui]} and {cls}")
            groups[tui] = cls
    if not groups:
        raise KBFormatError(f"{path}: no group rows")
    return groups


def save_semantic_groups(groups: dict[str, EntityClass], path: str | Path) -> None:
    lines = [f"{tui}\t{cls.value}" for tui, cls in sorted(groups.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

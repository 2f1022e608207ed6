"""Template filling, context-word extraction and expansion, caption interventions."""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"

_MARKER = re.compile(r"<\s*([A-Za-z_]+)\s*>")
_TOKEN = re.compile(r"[a-z0-9]+")

DETERMINERS = frozenset({"a", "an", "the", "some", "two", "three", "several", "many"})
CONNECTIVES = frozenset(
    {"and", "with", "or", "in", "on", "at", "near", "by", "of", "beside", "under", "behind", "next", "plus"}
)


class CaptionSource(str, enum.Enum):
    CDI_CAPTION = "cdi_caption"
    SYNTHESIZED = "synthesized"
    INTERVENED = "intervened"


class WordOrigin(str, enum.Enum):
    EXTRACTED = "extracted"
    EXPANDED = "expanded"


@dataclass(frozen=True)
class PromptTemplate:
    text: str

    def __post_init__(self):
        stripped = _MARKER.sub("", self.text)
        if "<" in stripped or ">" in stripped:
            raise ValueError(f"malformed slot marker in template {self.text!r}")

    @property
    def slots(self) -> list[str]:
        return [m.group(1) for m in _MARKER.finditer(self.text)]


@dataclass(frozen=True)
class Caption:
    text: str
    source: CaptionSource = CaptionSource.SYNTHESIZED
    provenance: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("caption text must be nonempty")

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class ContextWord:
    surface: str
    origin: WordOrigin = WordOrigin.EXTRACTED

    def __post_init__(self):
        if not self.surface or self.surface != self.surface.strip().lower():
            raise ValueError(f"context word must be lowercase and trimmed: {self.surface!r}")


@dataclass
class Lexicon:
    noun_set: set[str] = field(default_factory=set)
    class_synonym_map: dict[str, set[str]] = field(default_factory=dict)
    relation_table: dict[str, set[str]] = field(default_factory=dict)

    def __post_init__(self):
        for word, related in self.relation_table.items():
            if not related:
                raise ValueError(f"relation table entry for {word!r} is empty")

    @classmethod
    def load(cls, directory=None) -> Lexicon:
        """Read ``nouns.txt``, ``class_synonyms.tsv`` and ``relations.tsv`` (bundled by default)."""
        directory = Path(directory) if directory is not None else DATA_DIR
        nouns = {
            _normalize(line)
            for line in (directory / "nouns.txt").read_text(encoding="utf-8").splitlines()
            if line.strip() and not line.startswith("#")
        }
        synonyms = {k: set(v) for k, v in load_class_synonyms(directory / "class_synonyms.tsv").items()}
        relations = {k: set(v) for k, v in _read_tsv(directory / "relations.tsv").items() if v}
        return cls(nouns, synonyms, relations)


def _normalize(text: str) -> str:
    return " ".join(_TOKEN.findall(text.lower()))


def _read_tsv(path) -> dict[str, tuple[str, ...]]:
    table = {}
    path = Path(path)
    if not path.exists():
        return table
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        key, sep, values = raw.partition("\t")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'word<TAB>a,b,...'")
        table[_normalize(key)] = tuple(_normalize(v) for v in values.split(",") if v.strip())
    return table


def load_class_synonyms(path=None) -> dict[str, tuple[str, ...]]:
    path = path if path is not None else DATA_DIR / "class_synonyms.tsv"
    return _read_tsv(path)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _singular(word: str) -> str:
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith(("ses", "xes", "ches", "shes")):
        return word[:-2]
    if word.endswith("s") and not word.endswith("ss") and len(word) > 3:
        return word[:-1]
    return word


def class_terms(vocab, lexicon: Lexicon | None = None) -> set[str]:
    """Every surface form that names an interest class."""
    terms = set()
    for category in vocab:
        forms = {category.label, *category.synonyms}
        if lexicon is not None:
            forms |= lexicon.class_synonym_map.get(_normalize(category.label), set())
        terms |= {_normalize(f) for f in forms if _normalize(f)}
    return terms


def _names_class(phrase: str, terms: set[str]) -> bool:
    tokens = phrase.split()
    candidates = {phrase, " ".join(_singular(t) for t in tokens)}
    candidates.update(tokens)
    candidates.update(_singular(t) for t in tokens)
    return not candidates.isdisjoint(terms)


# --------------------------------------------------------------------------
# operations


def fill_template(template: PromptTemplate | str, slots: dict[str, str], source=CaptionSource.SYNTHESIZED, provenance="") -> Caption:
    if isinstance(template, str):
        template = PromptTemplate(template)
    missing = [s for s in template.slots if s not in slots]
    if missing:
        raise KeyError(f"no value for slot(s) {missing} in template {template.text!r}")
    unused = set(slots) - set(template.slots)
    if unused:
        logger.warning("unused slot value(s) %s for template %r", sorted(unused), template.text)
    text = _MARKER.sub(lambda m: f" {slots[m.group(1)]} ", template.text)
    text = " ".join(text.split())
    text = re.sub(r"\s+([,.;:!?])", r"\1", text)
    return Caption(text, source, provenance or template.text)


def extract_context_words(caption: Caption | str, vocab, lexicon: Lexicon) -> list[ContextWord]:
    """Noun phrases (up to two tokens) from ``caption`` with interest-class mentions removed.

    Bigrams take precedence over their unigrams, scanning left to right.
    """
    tokens = tokenize(str(caption))
    terms = class_terms(vocab, lexicon)
    found: list[str] = []
    i = 0
    while i < len(tokens):
        if i + 1 < len(tokens) and f"{tokens[i]} {tokens[i + 1]}" in lexicon.noun_set:
            phrase, i = f"{tokens[i]} {tokens[i + 1]}", i + 2
        elif tokens[i] in lexicon.noun_set:
            phrase, i = tokens[i], i + 1
        else:
            i += 1
            continue
        if not _names_class(phrase, terms) and phrase not in found:
            found.append(phrase)
    return [ContextWord(w, WordOrigin.EXTRACTED) for w in found]


def expand_context_words(words: list[ContextWord], lexicon: Lexicon, vocab=None) -> list[ContextWord]:
    if vocab is not None:
        terms = class_terms(vocab, lexicon)
    else:
        terms = set(lexicon.class_synonym_map)
        for related in lexicon.class_synonym_map.values():
            terms |= related
    out: list[ContextWord] = []
    seen: set[str] = set()

    def push(surface: str, origin: WordOrigin) -> None:
        if surface in seen or _names_class(surface, terms):
            return
        seen.add(surface)
        out.append(ContextWord(surface, origin))

    for word in words:
        push(word.surface, word.origin)
    for word in words:
        for related in sorted(lexicon.relation_table.get(word.surface, ())):
            push(related, WordOrigin.EXPANDED)
    return out


def synthesize_context_sentences(words: list[ContextWord], templates) -> list[Caption]:
    templates = [PromptTemplate(t) if isinstance(t, str) else t for t in templates]
    for t in templates:
        if "context" not in t.slots:
            raise ValueError(f"context template lacks a <context> marker: {t.text!r}")
    return [
        fill_template(t, {"context": w.surface}, CaptionSource.SYNTHESIZED, provenance=t.text)
        for w in words
        for t in templates
    ]


class InterventionKind(str, enum.Enum):
    REMOVE = "remove"
    ADD = "add"
    STYLE_CHANGE = "style_change"


@dataclass(frozen=True)
class Intervention:
    kind: InterventionKind
    target: str
    replacement: str = ""
    position: str = "append"

    def __post_init__(self):
        object.__setattr__(self, "kind", InterventionKind(self.kind))
        if not self.target.strip():
            raise ValueError("intervention target must be nonempty")
        if (self.kind is InterventionKind.STYLE_CHANGE) != bool(self.replacement.strip()):
            raise ValueError("replacement is required for style_change and only for it")
        if self.position not in ("append", "prepend"):
            raise ValueError(f"position must be append or prepend, got {self.position!r}")


def _phrase_pattern(phrase: str) -> re.Pattern:
    words = phrase.split()
    body = r"\s+".join(re.escape(w) for w in words)
    return re.compile(rf"(?<![\w]){body}(?![\w])", re.IGNORECASE)


def count_occurrences(text: str, phrase: str) -> int:
    return len(_phrase_pattern(phrase).findall(text))


def _last_word(text: str) -> str:
    words = text.split()
    return words[-1].lower() if words else ""


def _first_word(text: str) -> str:
    words = text.split()
    return words[0].lower() if words else ""


def _remove_once(text: str, match: re.Match) -> str:
    left, right = text[: match.start()], text[match.end():]
    left_s, right_s = left.rstrip(), right.lstrip()
    # list item: "x, target" or "target, x"
    if left_s.endswith(","):
        return f"{left_s[:-1].rstrip()} {right_s}".strip()
    if right_s.startswith(","):
        return f"{left_s} {right_s[1:].lstrip()}".strip()
    if _last_word(left_s) in DETERMINERS:
        left_s = left_s[: len(left_s) - len(left_s.split()[-1])].rstrip()
    lw, rw = _last_word(left_s), _first_word(right_s)
    if not left_s and rw in CONNECTIVES:
        right_s = right_s[len(right_s.split()[0]):].lstrip()
    elif not right_s and lw in CONNECTIVES:
        left_s = left_s[: len(left_s) - len(left_s.split()[-1])].rstrip()
    elif lw in CONNECTIVES and rw in CONNECTIVES:
        left_s = left_s[: len(left_s) - len(left_s.split()[-1])].rstrip()
    return f"{left_s} {right_s}".strip()


def intervene(caption: Caption | str, edit: Intervention) -> Caption:
    if isinstance(caption, str):
        caption = Caption(caption)
    text = caption.text
    pattern = _phrase_pattern(edit.target)
    if edit.kind is InterventionKind.ADD:
        text = f"{edit.target}, {text}" if edit.position == "prepend" else f"{text}, {edit.target}"
    elif edit.kind is InterventionKind.STYLE_CHANGE:
        if not pattern.search(text):
            return caption
        text = pattern.sub(lambda _: edit.replacement, text)
    else:
        if not pattern.search(text):
            return caption
        while (match := pattern.search(text)) is not None:
            text = _remove_once(text, match)
        text = " ".join(text.split())
    if not text:
        return caption
    return replace(caption, text=text, source=CaptionSource.INTERVENED)


def parse_intervention(line: str, lineno: int | None = None) -> Intervention:
    """Parse ``kind | target [| replacement-or-position]``."""
    parts = [p.strip() for p in line.split("|")]
    where = f"line {lineno}: " if lineno is not None else ""
    try:
        kind = InterventionKind(parts[0])
    except ValueError:
        raise ValueError(f"{where}unknown intervention kind {parts[0]!r}") from None
    try:
        if kind is InterventionKind.STYLE_CHANGE:
            if len(parts) != 3:
                raise ValueError("style_change needs 'style_change | target | replacement'")
            return Intervention(kind, parts[1], replacement=parts[2])
        if kind is InterventionKind.ADD:
            if len(parts) not in (2, 3):
                raise ValueError("add needs 'add | target [| append|prepend]'")
            return Intervention(kind, parts[1], position=parts[2] if len(parts) == 3 else "append")
        if len(parts) != 2:
            raise ValueError("remove needs 'remove | target'")
        return Intervention(kind, parts[1])
    except ValueError as exc:
        if str(exc).startswith(where) and where:
            raise
        raise ValueError(f"{where}{exc}") from None

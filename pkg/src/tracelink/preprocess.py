"""Text and code preprocessing pipelines.

Turns raw issue/commit strings into normalized token lists: lowercasing,
tokenization, stopword removal, suffix stemming, hyperlink/issue-tag
stripping, inline code-block extraction, and pattern-based identifier
extraction with camelCase/snake_case splitting.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable

__all__ = [
    "TextPipelineConfig",
    "CodePipelineConfig",
    "preprocess_text",
    "extract_issue_code",
    "extract_identifiers",
    "split_identifier",
    "porter_stem",
    "load_token_list",
    "DEFAULT_STOPWORDS",
    "DEFAULT_CODE_KEYWORDS",
    "DEFAULT_ISSUE_TAG_PATTERN",
]

# ~150 common English stopwords (standard list; configurable via file).
DEFAULT_STOPWORDS = frozenset("""
a about above after again against all am an and any are aren as at be because
been before being below between both but by can cannot could couldn did didn
do does doesn doing don down during each few for from further had hadn has
hasn have haven having he her here hers herself him himself his how i if in
into is isn it its itself just let me more most mustn my myself no nor not of
off on once only or other ought our ours ourselves out over own same shan she
should shouldn so some such than that the their theirs them themselves then
there these they this those through to too under until up very was wasn we
were weren what when where which while who whom why will with won would
wouldn you your yours yourself yourselves
""".split())

# Language keywords and primitive types dropped during identifier extraction
# (Java/Python/C-family; the corpus is code from mixed-language diffs).
DEFAULT_CODE_KEYWORDS = frozenset("""
abstract arguments assert async await boolean break byte case catch char
class const continue def default del delete do double elif else enum except
extends final finally float for from function global goto if implements
import in instanceof int interface is lambda long namespace native new none
nonlocal not null or package pass print private protected public raise return
self short static strictfp struct super switch synchronized this throw throws
transient true try typedef typeof unsigned var virtual void volatile while
with yield false
""".split())

# Bracketed (or bare) project-key-dash-number tags, e.g. "[CALCITE-2299]".
DEFAULT_ISSUE_TAG_PATTERN = r"\[?\b[A-Za-z][A-Za-z0-9]+-\d+\b\]?"

_URL_RE = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
_WORD_RE = re.compile(r"[a-z0-9]+")

_FENCED_RE = re.compile(r"```[^\n`]*\n?(.*?)```", re.DOTALL)
_JIRA_CODE_RE = re.compile(r"\{code(?::[^}]*)?\}(.*?)\{code\}", re.DOTALL)
_INDENT_RE = re.compile(r"^(?:  {2,}| ?\t)(.*)$")

# Camel split keeping digits attached to their letter run:
# "getUserName" -> get/User/Name, "HTMLParser" -> HTML/Parser, "utf8" -> utf8.
_CAMEL_RE = re.compile(r"[A-Z]+(?![a-z])|[A-Z][a-z0-9]*|[a-z0-9]+")
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

_DIFF_META_RE = re.compile(
    r"^(?:diff --git|index |new file|deleted file|similarity |rename |"
    r"Binary files|\+\+\+ |--- |@@ )"
)
_STRING_LIT_RE = re.compile(r"\"(?:\\.|[^\"\\\n])*\"|'(?:\\.|[^'\\\n])*'")
_COMMENT_RE = re.compile(r"/\*.*?\*/|//[^\n]*|(?<!\S)#[^\n]*", re.DOTALL)


@dataclass(frozen=True)
class TextPipelineConfig:
    """Configuration for the natural-language preprocessing pipeline."""

    stopwords: frozenset[str] = DEFAULT_STOPWORDS
    stemmer: str = "porter_like"  # "porter_like" | "none"
    strip_hyperlinks: bool = True
    strip_issue_tags: bool = True
    issue_tag_pattern: str = DEFAULT_ISSUE_TAG_PATTERN

    def __post_init__(self):
        if self.stemmer not in ("porter_like", "none"):
            raise ValueError(f"unknown stemmer: {self.stemmer!r}")
        re.compile(self.issue_tag_pattern)  # fail fast on a bad pattern


@dataclass(frozen=True)
class CodePipelineConfig:
    """Configuration for identifier extraction from code/diff text.

    `custom_extractor` (used when identifier_extractor == "pluggable") maps
    raw code to candidate identifier strings; splitting and lowercasing are
    still applied to its output, so an AST-backed extractor can be swapped in
    without changing downstream token shape.
    """

    identifier_extractor: str = "pattern_based"  # "pattern_based" | "pluggable"
    split_camel: bool = True
    split_snake: bool = True
    keywords: frozenset[str] = DEFAULT_CODE_KEYWORDS
    custom_extractor: Callable[[str], Iterable[str]] | None = field(
        default=None, compare=False
    )

    def __post_init__(self):
        if self.identifier_extractor not in ("pattern_based", "pluggable"):
            raise ValueError(
                f"unknown identifier_extractor: {self.identifier_extractor!r}"
            )
        if not (self.split_camel or self.split_snake):
            raise ValueError("at least one splitting rule must be enabled")
        if self.identifier_extractor == "pluggable" and self.custom_extractor is None:
            raise ValueError("pluggable extractor requires custom_extractor")


def extract_issue_code(raw: str) -> tuple[list[str], str]:
    """Pull inline code out of issue text.

    Detects fenced blocks (``` / Jira {code}) and runs of indented lines.
    Returns (code_blocks, remaining_text); the remaining text contains none
    of the extracted block contents, and re-extraction finds nothing.
    """
    blocks: list[str] = []

    def _capture(match: re.Match) -> str:
        blocks.append(match.group(1))
        return " "

    text = _FENCED_RE.sub(_capture, raw)
    text = _JIRA_CODE_RE.sub(_capture, text)

    remaining_lines: list[str] = []
    run: list[str] = []
    for line in text.split("\n"):
        m = _INDENT_RE.match(line)
        if m:
            run.append(m.group(1))
        else:
            if run:
                blocks.append("\n".join(run))
                run = []
            remaining_lines.append(line)
    if run:
        blocks.append("\n".join(run))

    return [b for b in blocks if b.strip()], "\n".join(remaining_lines)


def preprocess_text(raw: str, cfg: TextPipelineConfig | None = None) -> list[str]:
    """Raw text -> lowercase, stopword-free, stemmed token list.

    Inline code blocks, hyperlinks, and issue tags are removed before
    tokenization. Empty input yields an empty list.
    """
    cfg = cfg or TextPipelineConfig()
    if not raw:
        return []

    _, text = extract_issue_code(raw)
    if cfg.strip_hyperlinks:
        text = _URL_RE.sub(" ", text)
    if cfg.strip_issue_tags:
        text = re.sub(cfg.issue_tag_pattern, " ", text, flags=re.IGNORECASE)

    tokens = _WORD_RE.findall(text.lower())
    tokens = [t for t in tokens if t not in cfg.stopwords]
    if cfg.stemmer == "porter_like":
        tokens = [porter_stem(t) for t in tokens]
        # A stem may itself be a stopword ("having" -> "have"); filter again
        # so the pipeline is idempotent over its own output.
        tokens = [t for t in tokens if t not in cfg.stopwords]
    return tokens


def split_identifier(name: str, split_camel: bool = True, split_snake: bool = True) -> list[str]:
    """Split one identifier on snake/camel boundaries, lowercased."""
    parts = re.split(r"[_\W]+", name) if split_snake else [name]
    out: list[str] = []
    for part in parts:
        if not part:
            continue
        if split_camel:
            out.extend(m.lower() for m in _CAMEL_RE.findall(part))
        else:
            out.append(part.lower())
    return [p for p in out if p]


def extract_identifiers(code: str, cfg: CodePipelineConfig | None = None) -> list[str]:
    """Extract identifier tokens from a diff hunk or source text.

    Pattern-based default: diff metadata lines, string literals and comments
    are dropped, identifier-shaped tokens are collected in order of
    appearance, language keywords are filtered, and each identifier is split
    on camel/snake boundaries. Output tokens match [a-z0-9]+.
    """
    cfg = cfg or CodePipelineConfig()
    if not code:
        return []

    if cfg.identifier_extractor == "pluggable":
        candidates: Iterable[str] = cfg.custom_extractor(code)
    else:
        lines = [
            line for line in code.split("\n") if not _DIFF_META_RE.match(line)
        ]
        cleaned = _COMMENT_RE.sub(" ", _STRING_LIT_RE.sub(" ", "\n".join(lines)))
        candidates = _IDENT_RE.findall(cleaned)

    tokens: list[str] = []
    for ident in candidates:
        if ident.lower() in cfg.keywords:
            continue
        tokens.extend(
            split_identifier(ident, cfg.split_camel, cfg.split_snake)
        )
    return tokens


def load_token_list(path) -> frozenset[str]:
    """Load a stopword/keyword list from a plain-text file, one token per line."""
    with open(path, encoding="utf-8") as f:
        return frozenset(
            line.strip().lower() for line in f if line.strip()
        )


# ---------------------------------------------------------------------------
# Porter suffix-stripping stemmer (classic 1980 algorithm, reference rule set)
# ---------------------------------------------------------------------------

_VOWELS = "aeiou"


def _is_consonant(word: str, i: int) -> bool:
    ch = word[i]
    if ch in _VOWELS:
        return False
    if ch == "y":
        return i == 0 or not _is_consonant(word, i - 1)
    return True


def _measure(stem: str) -> int:
    """Number of VC sequences in the [C](VC)^m[V] decomposition."""
    m = 0
    prev_vowel = False
    for i in range(len(stem)):
        vowel = not _is_consonant(stem, i)
        if prev_vowel and not vowel:
            m += 1
        prev_vowel = vowel
    return m


def _has_vowel(stem: str) -> bool:
    return any(not _is_consonant(stem, i) for i in range(len(stem)))


def _ends_double_consonant(word: str) -> bool:
    return (
        len(word) >= 2
        and word[-1] == word[-2]
        and _is_consonant(word, len(word) - 1)
    )


def _ends_cvc(word: str) -> bool:
    return (
        len(word) >= 3
        and _is_consonant(word, len(word) - 3)
        and not _is_consonant(word, len(word) - 2)
        and _is_consonant(word, len(word) - 1)
        and word[-1] not in "wxy"
    )


_STEP2_RULES = (
    ("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
    ("izer", "ize"), ("bli", "ble"), ("alli", "al"), ("entli", "ent"),
    ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
    ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
    ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"),
    ("logi", "log"),
)

_STEP3_RULES = (
    ("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
    ("ical", "ic"), ("ful", ""), ("ness", ""),
)

_STEP4_SUFFIXES = (
    "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement",
    "ment", "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
)


def porter_stem(word: str) -> str:
    """Stem one lowercase word with the Porter suffix-stripping algorithm."""
    if len(word) <= 2 or not word.isalpha():
        return word

    # Step 1a
    if word.endswith("sses"):
        word = word[:-2]
    elif word.endswith("ies"):
        word = word[:-2]
    elif not word.endswith("ss") and word.endswith("s"):
        word = word[:-1]

    # Step 1b
    if word.endswith("eed"):
        if _measure(word[:-3]) > 0:
            word = word[:-1]
    else:
        stem = None
        if word.endswith("ed") and _has_vowel(word[:-2]):
            stem = word[:-2]
        elif word.endswith("ing") and _has_vowel(word[:-3]):
            stem = word[:-3]
        if stem is not None:
            word = stem
            if word.endswith(("at", "bl", "iz")):
                word += "e"
            elif _ends_double_consonant(word) and word[-1] not in "lsz":
                word = word[:-1]
            elif _measure(word) == 1 and _ends_cvc(word):
                word += "e"

    # Step 1c
    if word.endswith("y") and _has_vowel(word[:-1]):
        word = word[:-1] + "i"

    # Step 2
    for suffix, repl in _STEP2_RULES:
        if word.endswith(suffix):
            stem = word[: -len(suffix)]
            if _measure(stem) > 0:
                word = stem + repl
            break

    # Step 3
    for suffix, repl in _STEP3_RULES:
        if word.endswith(suffix):
            stem = word[: -len(suffix)]
            if _measure(stem) > 0:
                word = stem + repl
            break

    # Step 4
    for suffix in _STEP4_SUFFIXES:
        if word.endswith(suffix):
            stem = word[: -len(suffix)]
            if _measure(stem) > 1 and (
                suffix != "ion" or (stem and stem[-1] in "st")
            ):
                word = stem
            break

    # Step 5a
    if word.endswith("e"):
        stem = word[:-1]
        m = _measure(stem)
        if m > 1 or (m == 1 and not _ends_cvc(stem)):
            word = stem

    # Step 5b
    if _measure(word) > 1 and _ends_double_consonant(word) and word.endswith("l"):
        word = word[:-1]

    return word

"""
C-like lexer, renameable-identifier extraction and hashed feature vectors.

Hash constants and the keyword list are published in docs/format.md.
"""

import json
import logging
import math
import re
from collections.abc import Mapping
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import mmh3
import numpy as np
from django.core.exceptions import ValidationError

from .validators import validate_power_of_two

logger = logging.getLogger("moekd")

# ============================================================================
# TOKENS
# ============================================================================

C_KEYWORDS = frozenset(
    {
        "auto", "break", "case", "char", "const", "continue", "default", "do",
        "double", "else", "enum", "extern", "float", "for", "goto", "if",
        "inline", "int", "long", "register", "restrict", "return", "short",
        "signed", "sizeof", "static", "struct", "switch", "typedef", "union",
        "unsigned", "void", "volatile", "while", "_Alignas", "_Alignof",
        "_Atomic", "_Bool", "_Complex", "_Generic", "_Imaginary", "_Noreturn",
        "_Static_assert", "_Thread_local",
    }
)


class TokenKind(str, Enum):
    IDENTIFIER = "Identifier"
    KEYWORD = "Keyword"
    NUMBER = "NumberLiteral"
    STRING = "StringLiteral"
    OPERATOR = "Operator"
    PUNCTUATION = "Punctuation"
    WHITESPACE = "Whitespace"
    COMMENT = "Comment"


# Whitespace and comments never reach the featurizer.
TRIVIA = frozenset({TokenKind.WHITESPACE, TokenKind.COMMENT})

# Field accesses after these operators are not renameable.
MEMBER_ACCESS = frozenset({".", "->"})


@dataclass(frozen=True)
class Token:
    text: str
    kind: TokenKind
    offset: int  # byte offset in the UTF-8 source
    length: int  # byte length

    @property
    def span(self):
        return (self.offset, self.length)


_TOKEN_SPEC = [
    ("Whitespace", r"\s+"),
    ("Comment", r"//[^\n]*|(?s:/\*.*?\*/)"),
    ("OpenComment", r"/\*"),
    ("StringLiteral", r'"(?:\\(?:.|\n)|[^"\\\n])*"' + r"|'(?:\\(?:.|\n)|[^'\\\n])*'"),
    ("OpenString", r"[\"']"),
    (
        "NumberLiteral",
        r"0[xX][0-9A-Fa-f]+[uUlL]*|(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?[uUlLfF]*",
    ),
    ("Name", r"[A-Za-z_][A-Za-z0-9_]*"),
    (
        "Operator",
        r"->|\+\+|--|<<=|>>=|\.\.\.|<=|>=|==|!=|&&|\|\||\+=|-=|\*=|/=|%=|&=|\|=|\^="
        r"|<<|>>|[+\-*/%=<>!&|^~?:.]",
    ),
    ("Punctuation", r"."),
]
_MASTER_RE = re.compile("|".join(f"(?P<{name}>{pattern})" for name, pattern in _TOKEN_SPEC))


def tokenize(code):
    """
    Split C-like source into a lossless token stream.

    Concatenating the token texts reproduces ``code`` exactly. String and char
    literals and both comment styles are consumed as single tokens.

    Args:
        code: source text (str, or UTF-8 bytes)

    Returns:
        list[Token]

    Raises:
        ValidationError: invalid UTF-8, or an unterminated string/char literal or
            block comment (the message carries the byte offset)
    """
    if isinstance(code, (bytes, bytearray)):
        try:
            code = bytes(code).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ValidationError(
                f"Source is not valid UTF-8 at byte {exc.start}.", code="encoding"
            ) from exc

    tokens = []
    byte_offset = 0
    for match in _MASTER_RE.finditer(code):
        group = match.lastgroup
        text = match.group()
        if group == "OpenComment":
            raise ValidationError(
                f"Unterminated block comment at byte {byte_offset}.", code="unterminated"
            )
        if group == "OpenString":
            raise ValidationError(
                f"Unterminated string literal at byte {byte_offset}.", code="unterminated"
            )
        if group == "Name":
            kind = TokenKind.KEYWORD if text in C_KEYWORDS else TokenKind.IDENTIFIER
        else:
            kind = TokenKind(group)
        length = len(text.encode("utf-8"))
        tokens.append(Token(text, kind, byte_offset, length))
        byte_offset += length
    return tokens


def join_tokens(tokens):
    return "".join(token.text for token in tokens)


def renameable_positions(tokens):
    """Indices of Identifier tokens that are not field accesses."""
    positions = []
    previous = None
    for index, token in enumerate(tokens):
        if token.kind in TRIVIA:
            continue
        if token.kind is TokenKind.IDENTIFIER and not (
            previous is not None
            and previous.kind is TokenKind.OPERATOR
            and previous.text in MEMBER_ACCESS
        ):
            positions.append(index)
        previous = token
    return positions


def extract_identifiers(tokens):
    """
    Distinct renameable identifier names in first-occurrence order.

    Keywords are never returned (the lexer never marks them Identifier), and a
    name immediately following "." or "->" is a field access and is skipped.
    """
    seen = {}
    for index in renameable_positions(tokens):
        seen.setdefault(tokens[index].text, None)
    return list(seen)


# ============================================================================
# FEATURE HASHING
# ============================================================================

BUCKET_HASH_SEED = 0x0B0C
SIGN_HASH_SEED = 0x5167
NGRAM_SEPARATOR = "\x1f"


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    norm: float

    @property
    def dim(self):
        return self.values.shape[0]


@lru_cache(maxsize=1 << 17)
def _hash_words(key):
    data = key.encode("utf-8")
    bucket_word = mmh3.hash64(data, seed=BUCKET_HASH_SEED, signed=False)[0]
    sign_word = mmh3.hash64(data, seed=SIGN_HASH_SEED, signed=False)[0]
    return bucket_word, -1.0 if sign_word >> 63 else 1.0


def hashed_slot(key, dim):
    """Bucket index (hash mod dim) and sign (top bit of the second hash) for one n-gram key."""
    bucket_word, sign = _hash_words(key)
    return bucket_word & (dim - 1), sign


def ngram_keys(tokens):
    """Unigram and adjacent-bigram keys over the non-trivia token stream."""
    texts = [token.text for token in tokens if token.kind not in TRIVIA]
    keys = [f"u{NGRAM_SEPARATOR}{text}" for text in texts]
    keys.extend(
        f"b{NGRAM_SEPARATOR}{left}{NGRAM_SEPARATOR}{right}"
        for left, right in zip(texts, texts[1:])
    )
    return keys


def featurize(tokens, dim):
    """
    Signed hashed bag of unigrams and bigrams, L2-normalized.

    The norm is computed with an exactly rounded sum so vectors are identical
    across platforms. An empty stream yields the zero vector with norm 0.

    Raises:
        ValidationError: dim is not a power of two >= 2
    """
    dim = validate_power_of_two(dim)
    values = np.zeros(dim, dtype=np.float64)
    for key in ngram_keys(tokens):
        bucket, sign = hashed_slot(key, dim)
        values[bucket] += sign

    norm = math.sqrt(math.fsum((values * values).tolist()))
    if norm == 0.0:
        values.flags.writeable = False
        return FeatureVector(values, 0.0)
    values = values / norm
    values.flags.writeable = False
    return FeatureVector(values, 1.0)


def featurize_code(code, dim):
    return featurize(tokenize(code), dim)


# ============================================================================
# FEATURE TABLES (cached per sample id)
# ============================================================================


class FeatureTable(Mapping):
    """Read-only mapping from sample id to FeatureVector, backed by one matrix."""

    def __init__(self, ids, matrix):
        self.ids = tuple(ids)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.shape[0] != len(self.ids):
            raise ValidationError(
                f"Feature matrix has {self.matrix.shape[0]} rows for {len(self.ids)} ids.",
                code="shape",
            )
        self.matrix.flags.writeable = False
        self._rows = {sample_id: row for row, sample_id in enumerate(self.ids)}

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __getitem__(self, sample_id):
        values = self.matrix[self._rows[sample_id]]
        norm = 1.0 if values.any() else 0.0
        return FeatureVector(values, norm)

    def __iter__(self):
        return iter(self.ids)

    def __len__(self):
        return len(self.ids)

    def rows(self, sample_ids):
        """Stack the vectors of ``sample_ids`` into an (n, dim) matrix."""
        missing = [sample_id for sample_id in sample_ids if sample_id not in self._rows]
        if missing:
            raise ValidationError(
                f"No features for sample id(s): {', '.join(missing[:5])}", code="missing_features"
            )
        return self.matrix[[self._rows[sample_id] for sample_id in sample_ids]]

    @classmethod
    def from_samples(cls, samples, dim):
        samples = list(samples)
        matrix = np.zeros((len(samples), validate_power_of_two(dim)), dtype=np.float64)
        for row, sample in enumerate(samples):
            matrix[row] = featurize_code(sample.code, dim).values
        logger.info(f"Featurized {len(samples)} samples at dim {dim}")
        return cls([sample.id for sample in samples], matrix)

    def save(self, path):
        """Write ``<path>`` (.npy matrix) and ``<path>.ids.json``; both are byte-stable."""
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as handle:
            np.save(handle, self.matrix, allow_pickle=False)
        ids_path = ids_path_for(path)
        ids_path.write_text(json.dumps(list(self.ids)), encoding="utf-8")
        return [path, ids_path]

    @classmethod
    def load(cls, path):
        with open(path, "rb") as handle:
            matrix = np.load(handle, allow_pickle=False)
        ids = json.loads(ids_path_for(path).read_text(encoding="utf-8"))
        return cls(ids, matrix)


def ids_path_for(path):
    return path.with_name(path.name + ".ids.json")

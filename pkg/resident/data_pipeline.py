"""
Data Pipeline Module

Turns shared-task TSV files ("sentence<TAB>label") into byte-encoded datasets,
maintains the label vocabulary and language-group tables, and implements the
Twitter clean-up used for the B subtasks (hyperlink/username/hashtag removal
followed by English-tweet filtering).
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Dict, FrozenSet, Iterable, Iterator, List, Mapping, Optional, Union

import numpy as np
import pandas as pd

from resident.config import (
    B_GROUP,
    ENGLISH_MIN_HITS_PER_10,
    ENGLISH_STOPWORDS,
    PAD_ID,
    TASK_A_GROUPS,
)
from resident.exceptions import ConfigurationError, ContractViolation, ParseError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_HYPERLINK = re.compile(r"(?:https?://|www\.)\S*")
_USERNAME = re.compile(r"@[A-Za-z0-9_]+")
_HASHTAG = re.compile(r"#\S+")
_WHITESPACE = re.compile(r"\s+")
_WORD = re.compile(r"[^\W\d_]+(?:'[^\W\d_]+)?")


@dataclass(frozen=True)
class Example:
    """One sentence, its exact UTF-8 bytes, and its language code."""

    text: str
    label: str
    utf8: bytes

    @classmethod
    def from_text(cls, text: str, label: str) -> "Example":
        return cls(text=text, label=label, utf8=text.encode("utf-8"))


class LabelVocab:
    """Ordered language codes with a dense code <-> index mapping."""

    def __init__(self, codes: Iterable[str]):
        self.codes = tuple(codes)
        self._index = {code: i for i, code in enumerate(self.codes)}
        if len(self._index) != len(self.codes):
            raise ContractViolation(f"label codes must be unique: {list(self.codes)}")

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "LabelVocab":
        """Build a vocabulary from labels sorted lexicographically."""
        return cls(sorted(set(labels)))

    def index(self, code: str) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise ContractViolation(f"unknown label: {code!r}") from None

    def code(self, index: int) -> str:
        return self.codes[index]

    def __len__(self) -> int:
        return len(self.codes)

    def __iter__(self) -> Iterator[str]:
        return iter(self.codes)

    def __contains__(self, code: object) -> bool:
        return code in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelVocab) and self.codes == other.codes

    def __hash__(self) -> int:
        return hash(self.codes)

    def __repr__(self) -> str:
        return f"LabelVocab({list(self.codes)})"


@dataclass
class Dataset:
    """Examples in file order plus the label vocabulary they were read with."""

    examples: List[Example]
    labels: LabelVocab
    skipped: int = 0

    @classmethod
    def from_examples(cls, examples: Iterable[Example]) -> "Dataset":
        examples = list(examples)
        return cls(examples, LabelVocab.from_labels(e.label for e in examples))

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def texts(self) -> List[str]:
        return [e.text for e in self.examples]

    def gold_labels(self) -> List[str]:
        return [e.label for e in self.examples]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        """Examples at ``indices`` (in that order), keeping this vocabulary."""
        return Dataset([self.examples[i] for i in indices], self.labels)

    def encode(self, max_len: int) -> np.ndarray:
        """Byte-id matrix (n_examples x max_len), truncated and PAD-filled."""
        matrix = np.full((len(self.examples), max_len), PAD_ID, dtype=np.int64)
        for row, example in enumerate(self.examples):
            data = example.utf8[:max_len]
            matrix[row, : len(data)] = np.frombuffer(data, dtype=np.uint8)
        return matrix

    def label_ids(self, vocab: Optional[LabelVocab] = None) -> np.ndarray:
        vocab = vocab or self.labels
        return np.array([vocab.index(e.label) for e in self.examples], dtype=np.int64)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"text": self.texts(), "label": self.gold_labels()})


def encode_bytes(text: str, max_len: int) -> np.ndarray:
    """
    Encode text as raw UTF-8 byte ids, truncated at max_len and right-padded with PAD.

    Args:
        text: Input string
        max_len: Output length

    Returns:
        int64 array of length max_len
    """
    data = text.encode("utf-8")[:max_len]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[: len(data)] = np.frombuffer(data, dtype=np.uint8)
    return ids


def decode_bytes(ids: Iterable[int]) -> bytes:
    """Inverse of the byte codec: the byte values with PAD ids removed."""
    return bytes(int(i) for i in ids if int(i) != PAD_ID)


def load_tsv(path: PathLike) -> Dataset:
    """
    Read a "sentence<TAB>label" file.

    Blank lines are ignored; LF and CRLF endings are accepted. Lines that are
    not valid UTF-8 are skipped with a warning and counted in ``Dataset.skipped``.

    Args:
        path: TSV file path

    Returns:
        Dataset in file order with a lexicographically sorted vocabulary

    Raises:
        ParseError: On a line without exactly one TAB, an empty label, or a file
            without any examples
    """
    raw = Path(path).read_bytes()
    examples: List[Example] = []
    skipped = 0

    for number, line in enumerate(raw.split(b"\n"), start=1):
        if line.endswith(b"\r"):
            line = line[:-1]
        if not line.strip():
            continue
        try:
            decoded = line.decode("utf-8")
        except UnicodeDecodeError:
            skipped += 1
            logger.warning(f"Skipping line {number} of {path}: invalid UTF-8")
            continue

        tabs = decoded.count("\t")
        if tabs != 1:
            raise ParseError(f"expected exactly one TAB, found {tabs}", str(path), number)
        text, label = decoded.split("\t")
        if not label.strip():
            raise ParseError("empty label", str(path), number)
        examples.append(Example.from_text(text, label))

    if not examples:
        raise ParseError("file contains no examples", str(path), 0)
    if skipped:
        logger.warning(f"Skipped {skipped} invalid UTF-8 record(s) in {path}")

    dataset = Dataset.from_examples(examples)
    dataset.skipped = skipped
    logger.info(f"✓ Loaded {len(dataset)} examples with {len(dataset.labels)} labels from {path}")
    return dataset


def write_tsv(dataset: Dataset, path: PathLike) -> None:
    """Write a dataset as LF-terminated "sentence<TAB>label" lines."""
    lines = [f"{e.text}\t{e.label}\n" for e in dataset.examples]
    Path(path).write_bytes("".join(lines).encode("utf-8"))
    logger.info(f"✓ Wrote {len(lines)} lines to {path}")


def clean_tweet(text: str) -> str:
    """
    Remove hyperlinks, usernames and hashtags, then normalise whitespace.

    Hyperlinks are maximal non-space runs starting with http://, https:// or
    www.; usernames are "@" plus word characters; hashtags are "#" plus the rest
    of the token. Matches are replaced by a space, so a removal never joins two
    fragments into a new match and one pass is idempotent.
    """
    for pattern in (_HYPERLINK, _USERNAME, _HASHTAG):
        text = pattern.sub(" ", text)
    return _WHITESPACE.sub(" ", text).strip()


def is_english_by_stopwords(text: str) -> bool:
    """True when at least 2 of every 10 word tokens are common English function words."""
    tokens = _WORD.findall(text.lower())
    if not tokens:
        return False
    hits = sum(1 for token in tokens if token in ENGLISH_STOPWORDS)
    return hits * 10 >= ENGLISH_MIN_HITS_PER_10 * len(tokens)


class ClassifierPredicate:
    """English predicate backed by a scoring function, e.g. a trained model."""

    def __init__(self, scorer: Callable[[str], float], threshold: float = 0.5):
        self.scorer = scorer
        self.threshold = threshold

    def __call__(self, text: str) -> bool:
        return self.scorer(text) >= self.threshold


def filter_english(dataset: Dataset, predicate: Callable[[str], bool]) -> Dataset:
    """Keep the examples whose text the predicate does not flag as English."""
    kept = [e for e in dataset.examples if not predicate(e.text)]
    removed = len(dataset) - len(kept)
    if removed:
        logger.info(f"Removed {removed} English example(s)")
    return Dataset(kept, dataset.labels, dataset.skipped)


class GroupTable:
    """Read-only mapping of group name -> disjoint set of language codes."""

    def __init__(self, groups: Mapping[str, Iterable[str]]):
        frozen: Dict[str, FrozenSet[str]] = {
            name: frozenset(codes) for name, codes in groups.items()
        }
        owner: Dict[str, str] = {}
        for name, codes in frozen.items():
            for code in codes:
                if code in owner:
                    raise ConfigurationError(f"{code} belongs to both {owner[code]} and {name}")
                owner[code] = name
        self.groups = MappingProxyType(frozen)
        self._owner = MappingProxyType(owner)

    @property
    def names(self) -> List[str]:
        return list(self.groups)

    @property
    def labels(self) -> FrozenSet[str]:
        return frozenset(self._owner)

    def group_of(self, code: str) -> Optional[str]:
        return self._owner.get(code)

    def __getitem__(self, name: str) -> FrozenSet[str]:
        return self.groups[name]

    def __len__(self) -> int:
        return len(self.groups)


TASK_A = GroupTable(TASK_A_GROUPS)


def resolve_group(value: str, table: GroupTable = TASK_A) -> FrozenSet[str]:
    """
    Turn a --group argument into a set of language codes.

    "B" names the Twitter subtask languages, a group name from ``table`` names
    that group, anything else is read as a comma-separated list of codes.
    """
    if value.upper() == "B":
        return B_GROUP
    if value in table.groups:
        return table[value]
    codes = frozenset(code.strip() for code in value.split(",") if code.strip())
    if not codes:
        raise ConfigurationError(f"Empty language group: {value!r}")
    return codes

"""
Synthetic Similar-Language Corpus

Generates small corpora of closely related "languages" for exercising the
classifier without the shared-task data. Each language is a character bigram
Markov chain over lowercase ASCII, space and two accented letters.

Languages come in three groups of two. Within groups ``alpha`` and ``beta``
both members share one chain and differ only in which accented letters they
write; those letters share their first UTF-8 byte (ä C3 A4 vs æ C3 A6, ö C3 B6
vs ø C3 B8), so only the second byte tells them apart. Members of ``gamma``
write the same letters but follow perturbed copies of the group chain.
"""

import logging
import string
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from resident.data_pipeline import Dataset, Example, GroupTable

logger = logging.getLogger(__name__)

BASE_SYMBOLS = tuple(string.ascii_lowercase) + (" ",)
SPECIAL_MASS = 0.2
PERTURBATION = 0.4
SENTENCE_CHARS = (30, 90)

# group -> ((code, accented letters), (code, accented letters))
LANGUAGE_PAIRS: Dict[str, Tuple[Tuple[str, Tuple[str, str]], ...]] = {
    "alpha": (("aa-x", ("ä", "ö")), ("aa-y", ("æ", "ø"))),
    "beta": (("bb-x", ("ë", "ï")), ("bb-y", ("ê", "î"))),
    "gamma": (("cc-x", ("é", "è")), ("cc-y", ("é", "è"))),
}


@dataclass(frozen=True)
class SyntheticLanguage:
    code: str
    group: str
    symbols: Tuple[str, ...]
    transitions: np.ndarray

    def sample(self, rng: np.random.Generator, length: int) -> str:
        """Draw ``length`` characters, then collapse spaces and trim."""
        cumulative = np.cumsum(self.transitions, axis=1)
        state = int(rng.integers(len(string.ascii_lowercase)))
        chars = [self.symbols[state]]
        last = len(self.symbols) - 1
        for u in rng.random(length - 1):
            state = min(int(np.searchsorted(cumulative[state], u, side="right")), last)
            chars.append(self.symbols[state])
        return " ".join("".join(chars).split())


@dataclass
class SyntheticCorpus:
    train: Dataset
    test: Dataset
    groups: GroupTable
    languages: List[SyntheticLanguage]


def _chain(rng: np.random.Generator, concentration: float = 0.3) -> np.ndarray:
    """Row-stochastic matrix over base symbols plus two accented slots."""
    n_base = len(BASE_SYMBOLS)
    base = rng.dirichlet(np.full(n_base, concentration), size=n_base + 2)
    special = rng.dirichlet(np.ones(2), size=n_base + 2)
    return np.hstack([(1.0 - SPECIAL_MASS) * base, SPECIAL_MASS * special])


def _perturb(chain: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    fresh = _chain(rng)
    mixed = (1.0 - PERTURBATION) * chain + PERTURBATION * fresh
    return mixed / mixed.sum(axis=1, keepdims=True)


def build_languages(seed: int = 0) -> List[SyntheticLanguage]:
    """The six languages, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    languages = []
    for group, members in LANGUAGE_PAIRS.items():
        shared = _chain(rng)
        for code, accents in members:
            chain = _perturb(shared, rng) if group == "gamma" else shared
            languages.append(SyntheticLanguage(code, group, BASE_SYMBOLS + accents, chain))
    return languages


def _sample_examples(
    languages: Sequence[SyntheticLanguage], per_language: int, rng: np.random.Generator
) -> List[Example]:
    examples = []
    low, high = SENTENCE_CHARS
    for language in languages:
        produced = 0
        while produced < per_language:
            text = language.sample(rng, int(rng.integers(low, high + 1)))
            if text:
                examples.append(Example.from_text(text, language.code))
                produced += 1
    order = rng.permutation(len(examples))
    return [examples[i] for i in order]


def generate_corpus(n_train: int = 2000, n_test: int = 500, seed: int = 0) -> SyntheticCorpus:
    """
    Sample train and test sets with ``n_train``/``n_test`` sentences per language.

    Args:
        n_train: Training sentences per language
        n_test: Test sentences per language
        seed: Seed for the chains and the samples

    Returns:
        SyntheticCorpus with shuffled datasets and the group table
    """
    languages = build_languages(seed)
    rng = np.random.default_rng([seed, 1])
    train = Dataset.from_examples(_sample_examples(languages, n_train, rng))
    test = Dataset.from_examples(_sample_examples(languages, n_test, rng))
    groups = GroupTable(
        {group: [code for code, _ in members] for group, members in LANGUAGE_PAIRS.items()}
    )
    logger.info(
        f"✓ Generated synthetic corpus: {len(train)} train / {len(test)} test sentences, "
        f"{len(languages)} languages in {len(groups)} groups"
    )
    return SyntheticCorpus(train=train, test=test, groups=groups, languages=languages)

"""
deterministic prefix-table language model

Next-token distributions are stored per prefix text, keyed by the sha256 of the prefix. It serves as
in-process backend for the probe metrics and behind the mock completion transport and server,
so both paths see exactly the same numbers.
"""

import hashlib
import json
import logging
import math
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np

from ..errors import ContractError, DomainError, VocabError

logger = logging.getLogger(__name__)


def prefix_key(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


class PrefixTableModel:
    def __init__(
            self,
            vocab: Sequence[str],
            table: Mapping[str, Mapping[str, float]] | None = None,
            default: Mapping[str, float] | None = None,
            ) -> None:
        if len(set(vocab)) != len(vocab) or any(not t for t in vocab):
            raise VocabError('token strings must be nonempty and unique')
        self.vocab: list[str] = list(vocab)
        self._ids = {t: i for i, t in enumerate(self.vocab)}
        self._table: dict[str, np.ndarray] = {}
        self._default = None if default is None else self._as_vector(default)
        for key, dist in (table or {}).items():
            self._table[key] = self._as_vector(dist)

    def _as_vector(self, dist: Mapping[str, float]) -> np.ndarray:
        vector = np.zeros(len(self.vocab))
        for token, p in dist.items():
            if token not in self._ids:
                raise VocabError(f'token {token!r} is not in the vocabulary')
            vector[self._ids[token]] = p
        if np.any(vector < 0) or not math.isclose(vector.sum(), 1.0, abs_tol=1e-9):
            raise ContractError(f'next-token probabilities must be nonnegative and sum to 1, got {vector.sum()}')
        return vector

    def set(self, prefix: str, dist: Mapping[str, float]) -> None:
        self._table[prefix_key(prefix)] = self._as_vector(dist)

    def lookup(self, prefix: str) -> np.ndarray | None:
        """the distribution after prefix, None if the table has none and there is no default"""
        vector = self._table.get(prefix_key(prefix), self._default)
        return None if vector is None else vector.copy()

    def distribution_for_text(self, prefix: str) -> np.ndarray:
        vector = self.lookup(prefix)
        if vector is None:
            raise DomainError(f'no distribution for prefix of length {len(prefix)}')
        return vector

    def decode(self, tokens: Sequence[int]) -> str:
        return ''.join(self.vocab[t] for t in tokens)

    def next_token_distribution(self, tokens: Sequence[int]) -> np.ndarray:
        return self.distribution_for_text(self.decode(tokens))

    def encode(self, text: str) -> list[int]:
        return self.tokenize(text)

    def token_id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabError(f'token {token!r} is not in the vocabulary') from None

    def tokenize(self, text: str) -> list[int]:
        """greedy longest match"""
        longest = max(len(t) for t in self.vocab)
        ids: list[int] = []
        i = 0
        while i < len(text):
            for width in range(min(longest, len(text) - i), 0, -1):
                piece = text[i:i + width]
                if piece in self._ids:
                    ids.append(self._ids[piece])
                    i += width
                    break
            else:
                raise VocabError(f'cannot tokenize {text[i:i + 10]!r} at offset {i}')
        return ids

    @classmethod
    def from_answers(
            cls, vocab: Sequence[str], prompt: str, answers: Mapping[str, float], filler: str,
            ) -> "PrefixTableModel":
        """
        A model whose probability of each answer continuation of prompt is as given.
        The remaining mass at every prefix goes to the filler token; unlisted prefixes predict the filler.
        """
        model = cls(vocab, default={filler: 1.0})
        model.add_answers(prompt, answers, filler)
        return model

    def add_answers(self, prompt: str, answers: Mapping[str, float], filler: str) -> None:
        """set the distributions along the answer continuations of prompt, the remaining mass goes to filler"""
        mass: dict[tuple[int, ...], float] = {}
        for answer, p in answers.items():
            if p <= 0.0:
                continue
            tokens = self.tokenize(answer)
            for j in range(len(tokens) + 1):
                prefix = tuple(tokens[:j])
                mass[prefix] = mass.get(prefix, 0.0) + p
        if mass.get((), 0.0) > 1.0 + 1e-12:
            raise ContractError(f'answer probabilities sum to {mass[()]} > 1')

        children: dict[tuple[int, ...], dict[int, float]] = {}
        for prefix, p in mass.items():
            if prefix:
                children.setdefault(prefix[:-1], {})[prefix[-1]] = p

        filler_id = self.token_id(filler)
        for prefix, successors in children.items():
            total = 1.0 if not prefix else mass[prefix]
            vector = np.zeros(len(self.vocab))
            for token, p in successors.items():
                vector[token] = p / total
            vector[filler_id] += max(0.0, 1.0 - vector.sum())
            self._table[prefix_key(prompt + self.decode(prefix))] = vector

    def to_json(self) -> dict:
        def as_dict(vector: np.ndarray) -> dict[str, float]:
            return {self.vocab[i]: float(p) for i, p in enumerate(vector) if p > 0}
        return {
            'vocab': self.vocab,
            'default': None if self._default is None else as_dict(self._default),
            'table': {key: as_dict(v) for key, v in sorted(self._table.items())},
        }

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + '\n', encoding='utf-8')

    @classmethod
    def load(cls, path: Path) -> "PrefixTableModel":
        data = json.loads(path.read_text(encoding='utf-8'))
        logger.info('loaded prefix table with %d prefixes from %s', len(data['table']), path)
        return cls(data['vocab'], data['table'], data.get('default'))

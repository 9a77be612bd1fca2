"""
task definitions, example generation and prompt assembly

An example renders as `<input> > <answer> <sep>` on a character vocabulary, e.g. "42>44\n".
A prompt ends with the query `<input>>`, whose answer is left for the model.
"""

import json
import logging
import math
import string
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractError, RoundingError, SpecError, VocabError

logger = logging.getLogger(__name__)

SEPARATOR = '\n'
ARROW = '>'
LETTERS = string.ascii_lowercase


class Vocab:
    """single character symbols with a bijective id mapping"""

    def __init__(self, symbols: Sequence[str]) -> None:
        if len(set(symbols)) != len(symbols):
            raise VocabError('duplicate symbols in vocabulary')
        if any(len(s) != 1 for s in symbols):
            raise VocabError('all symbols must be single characters')
        self.symbols: tuple[str, ...] = tuple(symbols)
        self._ids = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._ids

    def id(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise VocabError(f'symbol {symbol!r} is not in the vocabulary') from None

    def encode(self, text: str) -> list[int]:
        return [self.id(c) for c in text]

    def decode(self, ids: Sequence[int]) -> str:
        try:
            return ''.join(self.symbols[i] for i in ids)
        except IndexError:
            raise VocabError(f'token ids {list(ids)} not all below {len(self)}') from None

    @property
    def separator_id(self) -> int:
        return self.id(SEPARATOR)

    @property
    def arrow_id(self) -> int:
        return self.id(ARROW)


VOCAB = Vocab(list(string.digits) + list(LETTERS) + ['+', '-', '@', '=', ARROW, SEPARATOR])


@dataclass(frozen=True)
class TaskSpec:
    """a named deterministic task: inputs from `input_sampler`, answers from `answer_fn`"""
    name: str
    family: str  # 'retrieval', 'plus' or 'custom'
    input_sampler: Callable[[np.random.Generator], str] = field(repr=False)
    answer_fn: Callable[[str], str] = field(repr=False)

    def answer(self, query: str) -> str:
        result = self.answer_fn(query)
        if not result:
            raise SpecError(f'task {self.name} produced an empty answer for {query!r}')
        return result


def _sample_distinct_letters(rng: np.random.Generator) -> str:
    return ''.join(rng.choice(list(LETTERS), size=8, replace=False))


def _sample_two_digit(rng: np.random.Generator) -> str:
    return str(int(rng.integers(10, 100)))


def make_retrieval_task(i: int) -> TaskSpec:
    """ret<i>: return the i-th of 8 distinct letters"""
    if not 1 <= i <= 8:
        raise SpecError(f'retrieval index must be in 1..8, got {i}')
    return TaskSpec(
        name=f'ret{i}',
        family='retrieval',
        input_sampler=_sample_distinct_letters,
        answer_fn=lambda text: text[i - 1],
    )


def make_plus_task(k: int) -> TaskSpec:
    """plus<k>: add k to a two-digit number"""
    if not 0 <= k <= 9:
        raise SpecError(f'plus offset must be in 0..9, got {k}')
    return TaskSpec(
        name=f'plus{k}',
        family='plus',
        input_sampler=_sample_two_digit,
        answer_fn=lambda text: str(int(text) + k),
    )


def task_family(family: str) -> list[TaskSpec]:
    match family:
        case 'retrieval':
            return [make_retrieval_task(i) for i in range(1, 9)]
        case 'plus':
            return [make_plus_task(k) for k in range(10)]
        case _:
            raise SpecError(f'unknown task family {family!r}')


def task_by_name(name: str) -> TaskSpec:
    """look up 'ret3' or 'plus7'"""
    if name.startswith('ret') and name[3:].isdigit():
        return make_retrieval_task(int(name[3:]))
    if name.startswith('plus') and name[4:].isdigit():
        return make_plus_task(int(name[4:]))
    raise SpecError(f'unknown task {name!r}')


def render_example(query: str, answer: str) -> str:
    return f'{query}{ARROW}{answer}{SEPARATOR}'


def render_query(query: str) -> str:
    return f'{query}{ARROW}'


@dataclass
class ICLSequence:
    """m examples of a single task; mask marks the answer tokens of examples 2..m"""
    task: str
    tokens: np.ndarray
    mask: np.ndarray

    def targets(self) -> np.ndarray:
        """next-token targets: the token at t + 1 wherever it is a masked answer token, else -1"""
        targets = np.full(len(self.tokens), -1, dtype=np.int64)
        answer_positions = np.flatnonzero(self.mask)
        targets[answer_positions - 1] = self.tokens[answer_positions]
        return targets


def make_icl_sequence(task: TaskSpec, m: int, rng: np.random.Generator, vocab: Vocab = VOCAB) -> ICLSequence:
    if m < 2:
        raise ContractError(f'an ICL sequence needs at least 2 examples, got m={m}')

    tokens: list[int] = []
    mask: list[bool] = []
    for j in range(m):
        query = task.input_sampler(rng)
        answer = task.answer(query)
        head = vocab.encode(query + ARROW)
        tokens += head
        mask += [False] * len(head)
        tokens += vocab.encode(answer)
        mask += [j > 0] * len(answer)
        tokens.append(vocab.separator_id)
        mask.append(False)

    return ICLSequence(task.name, np.array(tokens, dtype=np.int64), np.array(mask, dtype=bool))


def mixture_counts(D: Sequence[float], m_total: int) -> list[int]:
    """
    Largest-remainder rounding of D * m_total. The counts always sum to m_total,
    remaining examples go to the largest fractional parts, ties to the lower task index.
    """
    weights = np.asarray(D, dtype=np.float64)
    if weights.ndim != 1 or len(weights) == 0:
        raise SpecError('distribution must be a nonempty vector')
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise RoundingError(f'distribution {list(D)} is not a probability vector')
    if m_total < 0:
        raise RoundingError(f'cannot distribute {m_total} examples')

    exact = weights * m_total
    counts = np.floor(exact + 1e-9).astype(int)
    remainders = exact - counts
    missing = m_total - int(counts.sum())
    if missing < 0:
        raise RoundingError(f'rounding {list(D)} * {m_total} overshoots by {-missing}')
    order = sorted(range(len(weights)), key=lambda i: (-round(remainders[i], 12), i))
    for i in order[:missing]:
        counts[i] += 1
    return [int(c) for c in counts]


@dataclass
class MixturePrompt:
    """examples of several tasks in random order, followed by a query"""
    tokens: np.ndarray
    example_spans: list[tuple[int, int, str]]  # (start, end, task name), end exclusive
    query_span: tuple[int, int]
    distribution: dict[str, float]
    query: str
    text: str

    @property
    def labels(self) -> list[str]:
        return [task for _, _, task in self.example_spans]

    @property
    def feature_position(self) -> int:
        """position of the query's final '>' token"""
        return self.query_span[1] - 1


def _fresh_query(tasks: Sequence[TaskSpec], taken: set[str], rng: np.random.Generator) -> str:
    for _ in range(10_000):
        query = tasks[0].input_sampler(rng)
        if query not in taken:
            return query
    raise SpecError(f'could not draw a query distinct from {len(taken)} example inputs')


def _assemble(
        examples: list[tuple[str, str, str]], query: str, distribution: dict[str, float], vocab: Vocab,
        ) -> MixturePrompt:
    tokens: list[int] = []
    spans: list[tuple[int, int, str]] = []
    for task_name, x, y in examples:
        start = len(tokens)
        tokens += vocab.encode(render_example(x, y))
        spans.append((start, len(tokens), task_name))
    start = len(tokens)
    tokens += vocab.encode(render_query(query))
    text = ''.join(render_example(x, y) for _, x, y in examples) + render_query(query)
    return MixturePrompt(
        tokens=np.array(tokens, dtype=np.int64),
        example_spans=spans,
        query_span=(start, len(tokens)),
        distribution=distribution,
        query=query,
        text=text,
    )


def make_mixture_prompt(
        tasks: Sequence[TaskSpec],
        D: Sequence[float],
        m_total: int,
        rng: np.random.Generator,
        vocab: Vocab = VOCAB,
        ) -> MixturePrompt:
    """round(D_i * m_total) examples of each task in a seeded random order, then a fresh query"""
    if not tasks:
        raise SpecError('a mixture prompt needs at least one task')
    if len(D) != len(tasks):
        raise SpecError(f'{len(tasks)} tasks but a distribution over {len(D)}')
    if m_total < 1:
        raise ContractError(f'm_total must be at least 1, got {m_total}')

    counts = mixture_counts(D, m_total)
    labels = [task for task, count in zip(tasks, counts) for _ in range(count)]
    order = rng.permutation(len(labels))

    examples: list[tuple[str, str, str]] = []
    for index in order:
        task = labels[index]
        x = task.input_sampler(rng)
        examples.append((task.name, x, task.answer(x)))

    query = _fresh_query(tasks, {x for _, x, _ in examples}, rng)
    distribution = {task.name: float(p) for task, p in zip(tasks, D)}
    return _assemble(examples, query, distribution, vocab)


def _neutral_answer(family: Sequence[TaskSpec], x: str, rng: np.random.Generator) -> str:
    """an answer for input x that no task of the family would give"""
    taken = {task.answer(x) for task in family}
    sample = family[0].answer(x)
    if sample.isdigit():
        candidates = [str(v) for v in range(10, 10 ** len(sample)) if len(str(v)) == len(sample)]
    else:
        candidates = [c for c in LETTERS if len(c) == len(sample)]
    candidates = [c for c in candidates if c not in taken]
    if not candidates:
        raise SpecError(f'no neutral answer exists for input {x!r}')
    return candidates[int(rng.integers(len(candidates)))]


def make_zero_shot_prompt(
        family: Sequence[TaskSpec], query: str, rng: np.random.Generator, vocab: Vocab = VOCAB,
        ) -> MixturePrompt:
    """
    A single dummy example whose answer matches no task of the family, followed by the query.
    Used to evaluate patched task vectors without any task information in the context.
    """
    for _ in range(10_000):
        x = family[0].input_sampler(rng)
        if x != query:
            break
    else:
        raise SpecError(f'could not draw a dummy input distinct from {query!r}')
    y = _neutral_answer(family, x, rng)
    return _assemble([('none', x, y)], query, {}, vocab)


def dump_prompts(path: Path, prompts: Sequence[MixturePrompt]) -> None:
    """one json record per line: rendered text, task labels and the intended distribution"""
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for prompt in prompts:
            record = {'text': prompt.text, 'labels': prompt.labels, 'D': prompt.distribution}
            f.write(json.dumps(record, sort_keys=True) + '\n')


def load_prompts(path: Path, vocab: Vocab = VOCAB) -> list[MixturePrompt]:
    """replay a prompt dump, the text is split back into examples and query"""
    prompts: list[MixturePrompt] = []
    with open(path, encoding='utf-8') as f:
        for line in f:
            record = json.loads(line)
            *records, query_text = record['text'].split(SEPARATOR)
            if len(records) != len(record['labels']):
                raise SpecError(f'prompt dump line has {len(records)} examples but {len(record["labels"])} labels')
            examples = []
            for label, example in zip(record['labels'], records):
                x, _, y = example.partition(ARROW)
                examples.append((label, x, y))
            prompts.append(_assemble(examples, query_text.rstrip(ARROW), record['D'], vocab))
    return prompts


def is_probability_vector(D: Sequence[float]) -> bool:
    return all(p >= 0 for p in D) and math.isclose(sum(D), 1.0, abs_tol=1e-9)

"""
task settings of the measurement protocol against hosted models

Every prompt holds the same number of examples of each task of a setting in random order,
rendered as `<input> -> <answer>` lines, followed by `<query> ->`. A task's answer is scored as
the continuation ' <answer>'.
"""

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, SpecError
from .spellers import english, french, spanish

ARROW = ' ->'


def render_example(x: str, y: str) -> str:
    return f'{x}{ARROW} {y}\n'


def render_query(x: str) -> str:
    return f'{x}{ARROW}'


def continuation(answer: str) -> str:
    """the text scored for an answer"""
    return f' {answer}'


@dataclass(frozen=True)
class ProtocolPrompt:
    text: str
    query: str
    labels: list[str]     # task of every example, in prompt order
    answers: list[str]    # answer of every task of the setting to the query


@dataclass(frozen=True)
class TaskSetting:
    name: str
    task_names: tuple[str, ...]
    sample_input: Callable[[np.random.Generator], object]
    render_input: Callable[[object], str]
    answer_fns: tuple[Callable[[object], str], ...]

    def answers(self, x: object) -> list[str]:
        return [fn(x) for fn in self.answer_fns]

    def _sample_other_than(self, query: object, rng: np.random.Generator) -> object:
        for _ in range(10_000):
            x = self.sample_input(rng)
            if self.render_input(x) != self.render_input(query):
                return x
        raise SpecError(f'could not draw an example input distinct from the query {self.render_input(query)!r}')

    def make_prompt(self, examples_per_task: int, rng: np.random.Generator) -> ProtocolPrompt:
        if examples_per_task < 1:
            raise ContractError(f'examples_per_task must be at least 1, got {examples_per_task}')
        labels = [k for k in range(len(self.task_names)) for _ in range(examples_per_task)]
        order = rng.permutation(len(labels))

        query = self.sample_input(rng)
        lines = []
        for index in order:
            x = self._sample_other_than(query, rng)
            lines.append(render_example(self.render_input(x), self.answer_fns[labels[index]](x)))

        return ProtocolPrompt(
            text=''.join(lines) + render_query(self.render_input(query)),
            query=self.render_input(query),
            labels=[self.task_names[labels[i]] for i in order],
            answers=self.answers(query),
        )


def _two_numbers(rng: np.random.Generator) -> tuple[int, int]:
    a, b = rng.choice(np.arange(10, 100), size=2, replace=False)
    return int(a), int(b)


COUNTRIES: list[tuple[str, str, str]] = [
    ('France', 'Paris', 'Europe'),
    ('Germany', 'Berlin', 'Europe'),
    ('Spain', 'Madrid', 'Europe'),
    ('Italy', 'Rome', 'Europe'),
    ('Norway', 'Oslo', 'Europe'),
    ('Japan', 'Tokyo', 'Asia'),
    ('China', 'Beijing', 'Asia'),
    ('India', 'New Delhi', 'Asia'),
    ('Thailand', 'Bangkok', 'Asia'),
    ('Egypt', 'Cairo', 'Africa'),
    ('Kenya', 'Nairobi', 'Africa'),
    ('Nigeria', 'Abuja', 'Africa'),
    ('Morocco', 'Rabat', 'Africa'),
    ('Brazil', 'Brasilia', 'South America'),
    ('Argentina', 'Buenos Aires', 'South America'),
    ('Peru', 'Lima', 'South America'),
    ('Chile', 'Santiago', 'South America'),
    ('Canada', 'Ottawa', 'North America'),
    ('Mexico', 'Mexico City', 'North America'),
    ('Australia', 'Canberra', 'Oceania'),
]

WORDS: list[str] = [
    'apple', 'river', 'garden', 'planet', 'window', 'silver', 'forest', 'candle', 'museum', 'doctor',
    'bridge', 'summer', 'marble', 'pencil', 'rocket', 'jungle', 'violin', 'harbor', 'winter', 'orange',
]
if any(w[0] == w[-1] for w in WORDS):
    raise SpecError('letter words must not start and end with the same letter')


def _country(rng: np.random.Generator) -> tuple[str, str, str]:
    return COUNTRIES[int(rng.integers(len(COUNTRIES)))]


def _word(rng: np.random.Generator) -> str:
    return WORDS[int(rng.integers(len(WORDS)))]


SETTINGS: dict[str, TaskSetting] = {
    'addition': TaskSetting(
        name='addition',
        task_names=('numerals', 'english', 'french', 'spanish'),
        sample_input=_two_numbers,
        render_input=lambda x: f'{x[0]}+{x[1]}',
        answer_fns=(
            lambda x: str(x[0] + x[1]),
            lambda x: english(x[0] + x[1]),
            lambda x: french(x[0] + x[1]),
            lambda x: spanish(x[0] + x[1]),
        ),
    ),
    'capitals': TaskSetting(
        name='capitals',
        task_names=('capital', 'continent', 'capitalize'),
        sample_input=_country,
        render_input=lambda x: x[0],
        answer_fns=(lambda x: x[1], lambda x: x[2], lambda x: x[0].upper()),
    ),
    'copy_add': TaskSetting(
        name='copy_add',
        task_names=('copy_op1', 'copy_op2', 'add'),
        sample_input=_two_numbers,
        render_input=lambda x: f'{x[0]} {x[1]}',
        answer_fns=(lambda x: str(x[0]), lambda x: str(x[1]), lambda x: str(x[0] + x[1])),
    ),
    'letters': TaskSetting(
        name='letters',
        task_names=('first_lower', 'first_upper', 'last_lower', 'last_upper'),
        sample_input=_word,
        render_input=lambda x: x,
        answer_fns=(lambda w: w[0], lambda w: w[0].upper(), lambda w: w[-1], lambda w: w[-1].upper()),
    ),
}


def setting_by_name(name: str) -> TaskSetting:
    try:
        return SETTINGS[name]
    except KeyError:
        raise SpecError(f'unknown setting {name!r}, expected one of {sorted(SETTINGS)}') from None


def prompt_alphabet() -> list[str]:
    """every character that can occur in prompts and answers of the settings"""
    chars = set(ARROW + ' \n' + '0123456789+')
    for c in COUNTRIES:
        chars |= set(''.join(c)) | set(c[0].upper())
    for w in WORDS:
        chars |= set(w) | set(w.upper())
    for n in range(200):
        chars |= set(english(n)) | set(french(n)) | set(spanish(n))
    return sorted(chars)

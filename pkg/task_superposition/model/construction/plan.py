"""
tasks, parameters and residual layout of a constructed superposition model

A prompt of the constructed model is m examples `x_1 .. x_n = y` followed by the query `x_1 .. x_n =`,
so it has L = m (n + 2) + n + 1 tokens. Tokens are real-valued vectors of width d, plus one '=' token.
A task reads input x_i and predicts g(x_i); the label of an example sits s = n + 2 - i positions after x_i.
"""

import math
import re
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from ...errors import ContractError, SpecError
from ..transformer import binary_code_width
from .layout import SHARED_ROWS, ResidualLayout
from .relus import SumOfReLUs, fit_sum_of_relus


@dataclass(frozen=True)
class ConstructionTask:
    """copy (g is None) or scalar function task on input position `index` (1-based)"""
    name: str
    index: int
    g: Callable[[float], float] | None = field(default=None, repr=False)
    relus: SumOfReLUs | None = field(default=None, repr=False)

    @property
    def is_copy(self) -> bool:
        return self.g is None

    def apply(self, x: np.ndarray) -> np.ndarray:
        """exact answer for one input value"""
        x = np.asarray(x, dtype=np.float64)
        if self.g is None:
            return x.copy()
        return np.array([self.g(float(v)) for v in x])

    def approximate(self, x: np.ndarray) -> np.ndarray:
        """what the constructed network computes for one input value"""
        x = np.asarray(x, dtype=np.float64)
        if self.g is None:
            return x.copy()
        if self.relus is None:
            raise SpecError(f'functional task {self.name} has no fitted sum of ReLUs')
        return self.relus(x)

    def offset(self, n: int) -> int:
        """distance from the input x_i to the label of the same example"""
        return n + 2 - self.index


def copy_task(i: int) -> ConstructionTask:
    return ConstructionTask(name=f'copy{i}', index=i)


def function_task(name: str, i: int, g: Callable[[float], float], R: float, M: int) -> ConstructionTask:
    return ConstructionTask(name=name, index=i, g=g, relus=fit_sum_of_relus(g, R, M))


_FUNCTIONS: dict[str, Callable[[float], float]] = {
    'square': lambda x: x * x,
    'abs': abs,
    'neg': lambda x: -x,
    'double': lambda x: 2 * x,
}

def parse_tasks(text: str, R: float = 1.0, M: int = 65) -> list[ConstructionTask]:
    """comma separated names like 'copy1,copy3,square2'"""
    tasks = []
    for name in (t.strip() for t in text.split(',') if t.strip()):
        match = re.fullmatch(r'([a-z]+)(\d+)', name)
        if match is None:
            raise SpecError(f'cannot parse construction task {name!r}')
        kind, index = match.group(1), int(match.group(2))
        if kind == 'copy':
            tasks.append(copy_task(index))
        elif kind in _FUNCTIONS:
            tasks.append(function_task(name, index, _FUNCTIONS[kind], R, M))
        else:
            raise SpecError(f'unknown construction task kind {kind!r}')
    return tasks


@dataclass
class ConstructionSpec:
    tasks: list[ConstructionTask]
    n: int  # input symbols per example
    m: int  # examples per prompt
    values: np.ndarray = field(default_factory=lambda: np.arange(16, dtype=np.float64)[:, None])
    C_threshold: float = 20.0
    C_attend: float = 30.0
    C_execute: float | None = None  # defaults to C_attend
    relu_budget: int = 65
    radius: float = 1.0
    n_layers: int = 7
    d_model: int | None = None  # residual budget, the minimal width when unset

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]

        if self.m < 1:
            raise ContractError('a construction needs at least one labelled example (m >= 1)')
        if self.n < 1:
            raise SpecError(f'examples need at least one input symbol, got n={self.n}')
        if not self.tasks:
            raise SpecError('a construction needs at least one task')
        if len({t.name for t in self.tasks}) != len(self.tasks):
            raise SpecError('task names must be unique')
        if self.C_threshold <= 0:
            raise SpecError(f'C_threshold must be positive, got {self.C_threshold}')
        if (self.length - 2) * math.exp(-self.C_attend) >= 1e-9:
            raise SpecError(
                f'C_attend={self.C_attend} is too small for prompts of length {self.length}: '
                f'(L - 2) e^-C must stay below 1e-9'
            )
        if self.n_layers < 5:
            raise SpecError(f'the construction needs at least 5 layers, got {self.n_layers}')
        if len(self.values) < 1 or not np.all(np.isfinite(self.values)):
            raise SpecError('token values must be finite')

        for task in self.tasks:
            if not 1 <= task.index <= self.n:
                raise SpecError(f'task {task.name} reads x_{task.index}, examples only have {self.n} inputs')
            if not task.is_copy:
                if task.relus is None:
                    raise SpecError(f'functional task {task.name} needs a fitted sum of ReLUs')
                if self.d != 1:
                    raise SpecError(f'functional task {task.name} needs scalar token values, got d={self.d}')
                if np.max(np.abs(self.values)) > task.relus.radius:
                    raise SpecError(f'token values exceed the fit radius {task.relus.radius} of {task.name}')

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.m * (self.n + 2) + self.n + 1

    @property
    def vocab_size(self) -> int:
        return len(self.values) + 1

    @property
    def equals_id(self) -> int:
        return len(self.values)

    @property
    def code_width(self) -> int:
        return binary_code_width(self.length)

    @property
    def execute_constant(self) -> float:
        return self.C_attend if self.C_execute is None else self.C_execute

    def label_positions(self) -> list[int]:
        return [j * (self.n + 2) + self.n + 1 for j in range(self.m)]

    def prediction_bound(self, task: ConstructionTask) -> float:
        """1 + max |g(v)| over the token values, gates the query prediction"""
        predictions = np.array([task.approximate(v) for v in self.values])
        return 1.0 + float(np.max(np.abs(predictions)))

    def difference_bound(self, task: ConstructionTask) -> float:
        """upper bound of the L1 difference between the stream's prediction and any token value"""
        predictions = np.array([task.approximate(v) for v in self.values])
        return float(np.sum(np.max(np.abs(predictions), axis=0) + np.max(np.abs(self.values), axis=0)))


def plan_layout(spec: ConstructionSpec) -> ResidualLayout:
    layout = ResidualLayout()
    widths = {'x': spec.d, 'flag': 1, 'one': 1, 'pos': spec.code_width, 'shift1': spec.code_width, 'final': 1, 'penult': 1}
    for name in SHARED_ROWS:
        layout.add(name, widths[name])
    for task in spec.tasks:
        layout.add_stream(task.name, spec.d, spec.code_width)
    return layout

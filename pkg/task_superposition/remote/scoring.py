"""
answer probabilities over the wire and the mixture measurement protocol

Echo scoring sends prompt + answer with echo=True and max_tokens=0 and sums the logprobs of the
echoed answer tokens (one call). Sequential scoring asks for one token at a time and follows the
answer through the top alternatives (one call per answer token). The first strategy the endpoint
accepts is kept for all further calls of a Scorer.
"""

import asyncio
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from ..errors import BoundaryError, CollisionError, ContractError, LabError, RequestRejected, TransportError
from ..model.probe import OutputDistribution, percentile_summary
from ..util import derive_rng, draw_base_seed
from .schema import CompletionRequest, TokenLogprobs
from .settings import TaskSetting, continuation
from .transport import Transport

logger = logging.getLogger(__name__)

Strategy = Literal['echo', 'sequential']


class Scorer:
    def __init__(
            self, transport: Transport, model: str = '', logprobs: int = 5, strategy: Strategy | None = None,
            ) -> None:
        self.transport = transport
        self.model = model
        self.logprobs = logprobs
        self.strategy: Strategy | None = strategy

    async def score_answer(self, prompt: str, answer: str) -> float:
        """P(answer | prompt) as the product of the answer tokens' conditional probabilities"""
        if not answer:
            raise ContractError('cannot score an empty answer')
        if not prompt:
            raise ContractError('cannot score without a prompt')

        if self.strategy is None:
            try:
                probability = await self._score_echo(prompt, answer)
            except RequestRejected as e:
                if e.status not in (400, 422):
                    raise
                logger.info('endpoint rejected echo scoring (%s), falling back to sequential calls', e)
                self.strategy = 'sequential'
            else:
                self.strategy = 'echo'
                return probability

        if self.strategy == 'echo':
            return await self._score_echo(prompt, answer)
        return await self._score_sequential(prompt, answer)

    async def _logprobs(self, request: CompletionRequest) -> TokenLogprobs:
        response = await self.transport.complete(request)
        logprobs = response.choices[0].logprobs
        if logprobs is None:
            raise TransportError('completion response carries no logprobs')
        return logprobs

    async def _score_echo(self, prompt: str, answer: str) -> float:
        lp = await self._logprobs(CompletionRequest(
            model=self.model, prompt=prompt + answer, max_tokens=0, logprobs=1, echo=True,
        ))
        boundary = len(prompt)
        start = next((k for k, offset in enumerate(lp.text_offset) if offset == boundary), None)
        if start is None:
            k = max((k for k, offset in enumerate(lp.text_offset) if offset < boundary), default=0)
            token, cut = lp.tokens[k], boundary - lp.text_offset[k]
            raise BoundaryError('the answer does not start on a token boundary', (token[:cut], token[cut:]))

        echoed = ''.join(lp.tokens[start:])
        if echoed != answer:
            raise BoundaryError('the echoed answer tokens differ from the answer', (echoed, answer))
        values = lp.token_logprobs[start:]
        if any(v is None for v in values):
            return 0.0
        return math.exp(math.fsum(values))

    async def _score_sequential(self, prompt: str, answer: str) -> float:
        context, remaining = prompt, answer
        values: list[float] = []
        while remaining:
            lp = await self._logprobs(CompletionRequest(
                model=self.model, prompt=context, max_tokens=1, logprobs=self.logprobs,
            ))
            top = lp.top_logprobs[0] or {}
            matches = [t for t in top if t and remaining.startswith(t)]
            if not matches:
                overshoot = [t for t in top if t.startswith(remaining)]
                if overshoot:
                    raise BoundaryError('the remote tokenizer merges the answer end with further text',
                                        (remaining, overshoot[0][len(remaining):]))
                logger.warning('continuation %r is not among the top %d alternatives, scoring it as 0',
                               remaining, self.logprobs)
                return 0.0
            token = max(matches, key=len)
            values.append(top[token])
            context += token
            remaining = remaining[len(token):]
        return math.exp(math.fsum(values))


async def score_answer(
        transport: Transport, prompt: str, answer: str, model: str = '', strategy: Strategy | None = None,
        ) -> float:
    return await Scorer(transport, model, strategy=strategy).score_answer(prompt, answer)


@dataclass
class PromptFailure:
    prompt_id: str
    category: str
    message: str


@dataclass
class ProtocolResult:
    setting: str
    tasks: list[str]
    distributions: list[OutputDistribution] = field(default_factory=list)
    failures: list[PromptFailure] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failures

    def summary(self) -> dict[str, object]:
        """0/25/50/75/100 percentile band of every task probability and of the rest"""
        result: dict[str, object] = {
            'setting': self.setting, 'n': len(self.distributions), 'failed': len(self.failures),
            'complete': self.complete,
        }
        if self.distributions:
            for i, task in enumerate(self.tasks):
                result[f'p_{task}'] = percentile_summary([d.probabilities[i] for d in self.distributions])
            result['other'] = percentile_summary([d.other for d in self.distributions])
        return result


async def run_mixture_protocol(
        transport: Transport,
        setting: TaskSetting,
        n_prompts: int,
        rng: np.random.Generator,
        examples_per_task: int = 20,
        scorer: Scorer | None = None,
        ) -> ProtocolResult:
    """
    Score every task answer on n_prompts prompts of the setting. Prompts whose scoring fails are
    reported as failures, the others still count.
    """
    scorer = scorer or Scorer(transport)
    base = draw_base_seed(rng)

    async def measure(i: int) -> OutputDistribution:
        prompt = setting.make_prompt(examples_per_task, derive_rng(base, i))
        owners: dict[str, list[str]] = {}
        for task, answer in zip(setting.task_names, prompt.answers):
            owners.setdefault(answer, []).append(task)
        for answer, tasks in owners.items():
            if len(tasks) > 1:
                raise CollisionError(answer, tasks)

        probabilities = await asyncio.gather(
            *(scorer.score_answer(prompt.text, continuation(a)) for a in prompt.answers)
        )
        total = math.fsum(probabilities)
        if total > 1.0:
            logger.warning('answer probabilities of prompt %d sum to %s, flooring other at 0', i, total)
        return OutputDistribution(
            prompt_id=str(i), tasks=list(setting.task_names), answers=prompt.answers,
            probabilities=list(probabilities), other=max(0.0, 1.0 - total),
        )

    outcomes = await asyncio.gather(*(measure(i) for i in range(n_prompts)), return_exceptions=True)
    result = ProtocolResult(setting.name, list(setting.task_names))
    for i, outcome in enumerate(outcomes):
        if isinstance(outcome, LabError):
            logger.warning('prompt %d failed: %s', i, outcome)
            result.failures.append(PromptFailure(str(i), outcome.category, str(outcome)))
        elif isinstance(outcome, BaseException):
            raise outcome
        else:
            result.distributions.append(outcome)
    logger.info('%s: %d prompts scored, %d failed', setting.name, len(result.distributions), len(result.failures))
    return result


def write_protocol_result(csv_path: Path, failures_path: Path, result: ProtocolResult) -> None:
    """per-prompt distributions in the probe csv layout, failed prompts in their own file"""
    with open(csv_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['prompt_id', *(f'p_{t}' for t in result.tasks), 'other'])
        for d in sorted(result.distributions, key=lambda d: int(d.prompt_id)):
            writer.writerow([d.prompt_id, *map(repr, d.probabilities), repr(d.other)])

    with open(failures_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['prompt_id', 'category', 'message'])
        for failure in result.failures:
            writer.writerow([failure.prompt_id, failure.category, failure.message])

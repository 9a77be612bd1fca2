"""
greedy completions with logprobs from a prefix table model

Shared by the mock transport and the mock server, so both answer a request identically.
"""

import logging
import math

import numpy as np

from ..errors import ContractError, DomainError, LabError
from ..model.mock import PrefixTableModel
from ..util import stable_hash
from .schema import CompletionChoice, CompletionRequest, CompletionResponse, TokenLogprobs

logger = logging.getLogger(__name__)


class ModelNotFound(LabError):
    category = 'backend'

    def __init__(self, name: str) -> None:
        super().__init__(f'no model named {name!r} is served')
        self.name = name


class EchoNotSupported(ContractError):
    pass


def _logprob(p: float) -> float | None:
    return math.log(p) if p > 0.0 else None


def _top(model: PrefixTableModel, dist: np.ndarray | None, n: int) -> dict[str, float] | None:
    """n most likely tokens with nonzero probability, ties by token id"""
    if dist is None:
        return None
    order = sorted(np.flatnonzero(dist > 0), key=lambda i: (-dist[i], i))[:n]
    return {model.vocab[i]: math.log(dist[i]) for i in order}


def serve_completion(
        model: PrefixTableModel, request: CompletionRequest, supports_echo: bool = True,
        ) -> CompletionResponse:
    if request.echo and not supports_echo:
        raise EchoNotSupported('echo is not supported by this endpoint')
    if request.temperature != 0.0:
        raise ContractError('only greedy completions (temperature 0) are served')

    n_top = request.logprobs or 0
    tokens: list[str] = []
    token_logprobs: list[float | None] = []
    top_logprobs: list[dict[str, float] | None] = []
    offsets: list[int] = []

    if request.echo:
        text = ''
        for k, token_id in enumerate(model.tokenize(request.prompt)):
            token = model.vocab[token_id]
            dist = model.lookup(text) if k > 0 else None
            tokens.append(token)
            token_logprobs.append(None if dist is None else _logprob(float(dist[token_id])))
            top_logprobs.append(_top(model, dist, n_top))
            offsets.append(len(text))
            text += token

    context = request.prompt
    completion = ''
    for _ in range(request.max_tokens):
        dist = model.lookup(context)
        if dist is None:
            raise DomainError(f'no distribution after a prefix of length {len(context)}')
        token_id = int(np.argmax(dist))
        token = model.vocab[token_id]
        tokens.append(token)
        token_logprobs.append(_logprob(float(dist[token_id])))
        top_logprobs.append(_top(model, dist, n_top))
        offsets.append(len(context))
        context += token
        completion += token

    logprobs = None
    if request.logprobs is not None:
        logprobs = TokenLogprobs(
            tokens=tokens, token_logprobs=token_logprobs, top_logprobs=top_logprobs, text_offset=offsets,
        )
    return CompletionResponse(
        id=f'cmpl-{stable_hash(request.model_dump())}',
        model=request.model,
        choices=[CompletionChoice(
            text=(request.prompt if request.echo else '') + completion,
            logprobs=logprobs,
            finish_reason='length',
        )],
    )

"""
wire format of the completion endpoint

Requests: model, prompt, max_tokens, logprobs, echo, temperature.
Responses: choices[].text and choices[].logprobs with the per-token lists tokens, token_logprobs,
top_logprobs and text_offset. A token logprob of None marks the first echoed token (it has no
context) or a token without probability mass.
"""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..model.validation import StrictBaseModel


class CompletionRequest(StrictBaseModel):
    model: str
    prompt: str
    max_tokens: int = Field(default=16, ge=0)
    logprobs: int | None = Field(default=None, ge=1, le=20)
    echo: bool = False
    temperature: float = Field(default=0.0, ge=0.0)


class _ResponseModel(BaseModel):
    """hosted endpoints add fields of their own, those are ignored"""
    model_config = ConfigDict(extra='ignore')


class TokenLogprobs(_ResponseModel):
    tokens: list[str]
    token_logprobs: list[float | None]
    top_logprobs: list[dict[str, float] | None]
    text_offset: list[int]

    @model_validator(mode='after')
    def check_lists(self):
        n = len(self.tokens)
        if not len(self.token_logprobs) == len(self.top_logprobs) == len(self.text_offset) == n:
            raise ValueError('per-token lists differ in length')
        if any(lp is not None and lp > 0.0 for lp in self.token_logprobs):
            raise ValueError('log probabilities must not be positive')
        for top in self.top_logprobs:
            values = list((top or {}).values())
            if any(v > 0.0 for v in values):
                raise ValueError('log probabilities must not be positive')
            if values != sorted(values, reverse=True):
                raise ValueError('top alternatives must be sorted by descending log probability')
        return self


class CompletionChoice(_ResponseModel):
    text: str
    index: int = 0
    logprobs: TokenLogprobs | None = None
    finish_reason: str | None = None


class CompletionResponse(_ResponseModel):
    id: str = ''
    object: Literal['text_completion'] = 'text_completion'
    model: str = ''
    choices: list[CompletionChoice] = Field(min_length=1)

from collections.abc import Callable
from typing import Generic, Type, TypeVar
import hashlib
import inspect
import json

import numpy as np


T = TypeVar('T')

class ArgExtractor(Generic[T]):
    def __init__(self, function: Callable, arg_name: str, arg_type: Type[T] | None):
        """
        Creates an extractor object, which can be used to access the function parameter as specified
        by its name and type from given (*args, **kwargs) in a decorator.
        """
        sig = inspect.signature(function)

        for index, param in enumerate(sig.parameters.values()):
            if param.name == arg_name and (param.annotation == arg_type or (arg_type is None)):
                self._param = param
                self._index = index
                break
        else:
            raise ValueError(
                f'No argument "{arg_name}: {arg_type or ""}" in signature of function "{function.__name__}"'
            )

    def __call__(self, *args, **kwargs) -> T:
        match self._param.kind:
            case inspect.Parameter.POSITIONAL_ONLY:
                return args[self._index]
            case inspect.Parameter.KEYWORD_ONLY:
                return kwargs[self._param.name]
            case _:
                if self._param.name in kwargs:
                    return kwargs[self._param.name]
                if self._index < len(args):
                    return args[self._index]
                return self._param.default


def derive_rng(*keys: int) -> np.random.Generator:
    """
    Independent random stream for the given integer keys, e.g. (seed, step) or (base, prompt index).
    The same keys always give the same stream, regardless of what else was drawn before.
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def draw_base_seed(rng: np.random.Generator) -> int:
    """draw a seed from rng, used as the first key of derived per-item streams"""
    return int(rng.integers(0, 2**62))


def stable_hash(data: object, length: int = 12) -> str:
    """short hex digest of a json-serializable object, independent of dict ordering"""
    text = json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:length]

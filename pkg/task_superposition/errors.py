"""
exception types shared by all parts of the lab

Every error carries a short `category` tag. The command line reports it as
`error category=<tag> message=...`, the mock completion server maps it to an http status.
"""


class LabError(Exception):
    """base class for all errors raised on purpose by this package"""
    category = 'lab'


class DimensionError(LabError, ValueError):
    category = 'dimension'


class TargetIndexError(LabError, IndexError):
    category = 'index'


class VocabError(LabError, ValueError):
    category = 'vocab'


class SequenceLengthError(LabError, ValueError):
    category = 'length'


class PatchError(LabError, IndexError):
    category = 'patch'


class ContractError(LabError, ValueError):
    """a documented precondition of an operation was violated"""
    category = 'contract'


class NumericError(LabError, ArithmeticError):
    category = 'numeric'


class TrainingDivergedError(NumericError):
    """the loss became non-finite during training"""
    def __init__(self, step: int, batch_seed: tuple[int, int], loss: float) -> None:
        super().__init__(f'non-finite loss {loss} at step {step} (batch seed {batch_seed})')
        self.step = step
        self.batch_seed = batch_seed
        self.loss = loss


class SpecError(LabError, ValueError):
    """a task or construction description is invalid"""
    category = 'spec'


class RoundingError(LabError, ValueError):
    category = 'rounding'


class LayoutError(LabError, ValueError):
    category = 'layout'


class CapacityError(LabError):
    """the residual stream is too small for the requested construction"""
    category = 'capacity'

    def __init__(self, required: int, available: int) -> None:
        super().__init__(f'construction needs {required} residual rows, only {available} available')
        self.required = required
        self.available = available


class VerificationError(LabError, AssertionError):
    """a constructed model disagrees with its analytic oracle"""
    category = 'verification'


class CollisionError(LabError, ValueError):
    """two tasks produce the same answer, so their probability mass can't be told apart"""
    category = 'collision'

    def __init__(self, answer: str, tasks: list[str]) -> None:
        super().__init__(f'tasks {", ".join(tasks)} share the answer {answer!r}')
        self.answer = answer
        self.tasks = tasks


class BudgetError(LabError):
    """enumeration stopped early; `partial` holds what was found until then"""
    category = 'budget'

    def __init__(self, message: str, partial: object) -> None:
        super().__init__(message)
        self.partial = partial


class DomainError(LabError, ValueError):
    category = 'domain'


class BackendError(LabError):
    """a next-token provider failed while scoring the answer token at `index`"""
    category = 'backend'

    def __init__(self, index: int, message: str) -> None:
        super().__init__(f'backend failed at answer token {index}: {message}')
        self.index = index
        self.reason = message


class LayerMismatchError(LabError, ValueError):
    category = 'layer-mismatch'


class DegeneracyError(LabError, ArithmeticError):
    category = 'degeneracy'


class TransportError(LabError):
    """the remote endpoint could not be reached or kept failing"""
    category = 'transport'


class RequestRejected(TransportError):
    """the remote endpoint answered with a non-retryable client error"""
    def __init__(self, status: int, message: str) -> None:
        super().__init__(f'request rejected with status {status}: {message}')
        self.status = status


class BoundaryError(LabError, ValueError):
    """the remote tokenizer splits the answer differently than the prompt/answer boundary"""
    category = 'boundary'

    def __init__(self, message: str, split: tuple[str, str]) -> None:
        super().__init__(f'{message} (split {split[0]!r} | {split[1]!r})')
        self.split = split


class UsageError(LabError, ValueError):
    """invalid command line flags or configuration keys"""
    category = 'usage'


class ArtifactExistsError(LabError, FileExistsError):
    category = 'io'

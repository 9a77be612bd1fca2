"""
Provides an event system, allowing different components to listen to progress of long running operations.
E.g., a `training.step` event is consumed by the progress bar of the command line and by the logger,
without the training loop knowing about either of them.

Note: In order to avoid import loops, data structures for events are created together with and
      exclusively for the event type -- don't reuse e.g. the result types of the model operations.
"""

from collections.abc import Callable
from dataclasses import dataclass
from typing import Generic, TypeVar

T = TypeVar("T")


class Event(Generic[T]):
    """
    A generic event wrapper that allows you to register handlers
    that accept an event payload of type T.
    """
    def __init__(self, group: "EventGroup[T] | None" = None) -> None:
        self._handlers: list[Callable[[T], None]] = []
        self.group: EventGroup[T] | None = group

    def add_handler(self, handler: Callable[[T], None]) -> Callable[[T], None]:
        """Register a handler for this event."""
        self._handlers.append(handler)
        return handler

    def remove_handler(self, handler: Callable[[T], None]) -> None:
        self._handlers.remove(handler)

    def emit(self, data: T) -> None:
        """
        Emit the event by running all its handlers in registration order.
        If the event belongs to an EventGroup, also run the groups global handlers.
        """
        for handler in list(self._handlers):
            handler(data)
        if self.group is not None:
            self.group.emit_global(data)


class EventGroup(Generic[T]):
    """
    An event group that holds global listeners for all events in the group.
    Individual Event[T] objects created by the group will trigger these listeners
    when they are emitted.
    """
    def __init__(self) -> None:
        self._global_handlers: list[Callable[[T], None]] = []

    def add_handler(self, handler: Callable[[T], None]) -> Callable[[T], None]:
        """Register a global listener for all events in this group."""
        self._global_handlers.append(handler)
        return handler

    def remove_handler(self, handler: Callable[[T], None]) -> None:
        self._global_handlers.remove(handler)

    def emit_global(self, data: T) -> None:
        for handler in list(self._global_handlers):
            handler(data)

    def create_event(self) -> Event[T]:
        """Create a new Event[T] that is associated with this EventGroup."""
        return Event[T](self)


@dataclass
class ProgressData:
    operation: str  # e.g. 'train' or 'sweep'
    done: int
    total: int
    loss: float | None = None  # only set by training steps

progress = EventGroup[ProgressData]()
training_step = progress.create_event()
sweep_point = progress.create_event()
layer_scanned = progress.create_event()

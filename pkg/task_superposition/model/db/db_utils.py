from datetime import datetime, timezone
import enum
import peewee as pw

from typing import Generic, TypeVar

T = TypeVar('T', bound=enum.Enum)


class AutoNameEnum(enum.Enum):
    """'auto()' sets the value to the name, so values read well in manifests and the ledger"""
    @staticmethod
    def _generate_next_value_(name, start, count, last_values) -> str:
        return name


class EnumField(pw.CharField, Generic[T]):
    """
    Stores members of an enum type by name, e.g. RunStatus.FAILED -> 'FAILED'.
    The column is as wide as the longest name; names of other enums are rejected on write.
    """
    def __init__(self, enum_type: type[T], **kwargs) -> None:
        kwargs.setdefault('max_length', max(len(member.name) for member in enum_type))
        super().__init__(**kwargs)
        self._type = enum_type

    def db_value(self, value: T | str | None) -> str | None:
        if value is None:
            return None
        if isinstance(value, str):
            value = self._type[value]
        if not isinstance(value, self._type):
            raise TypeError(f'{value!r} is no {self._type.__name__}')
        return value.name

    def python_value(self, value: str | None) -> T | None:
        return None if value is None else self._type[value]


class UTCTimestampField(pw.TimestampField):
    """
    Integer microseconds since the epoch, read back as timezone-aware UTC datetimes.
    Runs finishing within the same second keep their order.
    """
    def __init__(self, **kwargs) -> None:
        kwargs.update(utc=True, resolution=10**6)
        super().__init__(**kwargs)

    def python_value(self, value) -> datetime | None:
        result = super().python_value(value)
        return result and result.replace(tzinfo=timezone.utc)

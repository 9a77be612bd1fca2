import dataclasses
import logging
import string
import time
from datetime import datetime, timezone
from functools import wraps
from pathlib import Path
from typing import Any, Literal

import peewee as pw
from pydantic import BaseModel

from ..util import ArgExtractor
from . import db
from .db.run_event import RunEvent, RunStatus

logger = logging.getLogger(__name__)


def connect(path: Path) -> pw.SqliteDatabase:
    """open (and create if necessary) the run ledger at path"""
    path.parent.mkdir(parents=True, exist_ok=True)
    database = pw.SqliteDatabase(str(path))
    db.proxy.initialize(database)
    database.connect(reuse_if_open=True)
    database.create_tables([RunEvent])
    return database


def create_run_entry(
        subcommand: str, run_id: str, status: RunStatus, duration: float,
        event_type: str, event_description: str,
        ) -> None:
    """add one record to the run ledger, if one is connected"""
    logger.info((subcommand, run_id, status.name, event_type, event_description))

    if db.proxy.obj is None:
        logger.debug('no run ledger connected, skipping the record')
        return

    with db.proxy.atomic():
        RunEvent.create(
            subcommand=subcommand,
            run_id=run_id,
            timestamp=datetime.now(timezone.utc),
            status=status,
            duration=duration,
            event_type=event_type,
            event_description=event_description,
        )


class _ConfigFormatter(string.Formatter):
    """custom string formatter that shows dataclass configs and pydantic models as compact key=value lists"""
    def format_field(self, value: Any, format_spec: str) -> Any:
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return ' '.join(f'{k}={v}' for k, v in dataclasses.asdict(value).items())
        if isinstance(value, BaseModel):
            explicitly_set_fields = {field: getattr(value, field) for field in value.model_fields_set}
            return f"{explicitly_set_fields}"
        return super().format_field(value, format_spec)


def log_call(
        description: str = "",
        when: Literal["always", "on_success"] = "always",
        event_type: str | None = None,
        subcommand_arg_name: str = "subcommand",
        run_id_arg_name: str = "run_id",
        ):
    """
    Decorator to record calls of run functions in the run ledger.

    Requires the function to take the subcommand name and the run id as parameters, whose names
    can be specified in "subcommand_arg_name" and "run_id_arg_name".
    The description supports formatting arguments, which will be looked up in the function parameters.
    If no event_type is given, the module and name of the wrapped function is used.
    """

    # inspect the description to find tokens to replace by function arguments
    formatter = _ConfigFormatter()
    tokens = [field_name.split('.')[0] for _, field_name, _, _ in formatter.parse(description) if field_name]

    def _run_log(f):
        get_subcommand = ArgExtractor(function=f, arg_name=subcommand_arg_name, arg_type=None)
        get_run_id = ArgExtractor(function=f, arg_name=run_id_arg_name, arg_type=None)

        # get access to all required parameters of f for the description string
        extractors = {
            token: ArgExtractor(f, arg_name=token, arg_type=None)
            for token in tokens
        }

        @wraps(f)
        def __run_log(*args, **kwargs):
            values = {key: ext(*args, **kwargs) for key, ext in extractors.items()}

            status = RunStatus.SUCCEEDED
            start = time.perf_counter()
            try:
                return f(*args, **kwargs)
            except:
                status = RunStatus.FAILED
                raise
            finally:
                if status == RunStatus.SUCCEEDED or when == 'always':
                    create_run_entry(
                        subcommand=get_subcommand(*args, **kwargs),
                        run_id=get_run_id(*args, **kwargs),
                        status=status,
                        duration=time.perf_counter() - start,
                        event_type=event_type or f"{f.__module__.split('.')[-1]}.{f.__name__}",
                        event_description=formatter.format(description, **values),
                    )

        return __run_log
    return _run_log


"""
model operations
"""

@dataclasses.dataclass
class RunRecord:
    """a run ledger entry"""
    subcommand: str
    run_id: str
    timestamp: datetime
    status: RunStatus
    duration: float
    event_type: str
    event_description: str


def fetch_log(before: datetime | None = None, num_entries: int = 10) -> list[RunRecord]:
    """Returns the most recent runs older than the given timestamp."""
    query = RunEvent.select().order_by(RunEvent.timestamp.desc(), RunEvent.id.desc())
    if before is not None:
        query = query.where(RunEvent.timestamp < before)  # type: ignore
    query = query.limit(num_entries)

    return [
        RunRecord(
            subcommand=event.subcommand,  # type: ignore
            run_id=event.run_id,  # type: ignore
            timestamp=event.timestamp,  # type: ignore
            status=event.status,  # type: ignore
            duration=event.duration,  # type: ignore
            event_type=event.event_type,  # type: ignore
            event_description=event.event_description,  # type: ignore
        )
        for event in query
    ]

"""
The raw run ledger database model, without logic
"""

from enum import auto

import peewee as pw

from ._proxy import db_proxy
from .db_utils import AutoNameEnum, EnumField, UTCTimestampField


class RunStatus(AutoNameEnum):
    SUCCEEDED = auto()
    FAILED = auto()


class RunEvent(pw.Model):
    class Meta:
        database = db_proxy

    subcommand = pw.CharField()  # e.g. 'train' or 'construct'
    run_id = pw.CharField()  # name of the result directory below <out>/<subcommand>/
    timestamp = UTCTimestampField()  # time the run finished
    status = EnumField(RunStatus)
    duration = pw.FloatField()  # wall time in seconds
    event_type = pw.CharField()  # module and name of the logged operation
    event_description = pw.TextField()  # formatted description of the run's arguments

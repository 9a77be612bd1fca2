from ._proxy import db_proxy as proxy
from . import run_event, db_utils

"""
command line entry point

    task-superposition <subcommand> [--config FILE] [--seed N] [--out DIR] [--overwrite] [flags]
    task-superposition runs [--out DIR] [--last N]

Flags override config file keys, which override the defaults. Errors end the run with one line
`error category=<tag> message=<json string>` on stderr, exit status 2 for usage errors and 1 otherwise. Unexpected exceptions are reported with
category=internal, their traceback goes to the debug log.
"""

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

from pydantic import ValidationError
from tqdm import tqdm

from . import __version__, events
from .artifacts import RunDirectory
from .config import load_config, schemas
from .errors import LabError, UsageError
from .experiments import RUNNERS
from .model import runlog

logger = logging.getLogger(__name__)


"""
error handling
"""

_error_handlers: list[tuple[type[BaseException], Callable[[BaseException], int]]] = []


def errorhandler(error_type: type[BaseException]):
    """register a handler that reports an error and returns the exit status, first match wins"""
    def register(handler: Callable[[BaseException], int]):
        _error_handlers.append((error_type, handler))
        return handler
    return register


def _report(category: str, message: str) -> None:
    print(f'error category={category} message={json.dumps(message)}', file=sys.stderr)


@errorhandler(UsageError)
def handle_usage_error(error: UsageError) -> int:
    _report(error.category, str(error))
    return 2


@errorhandler(LabError)
def handle_lab_error(error: LabError) -> int:
    _report(error.category, str(error))
    return 1


@errorhandler(ValidationError)
def handle_pydantic_validation_error(error: ValidationError) -> int:
    _report('validation', '; '.join(f'{".".join(map(str, e["loc"]))}: {e["msg"]}' for e in error.errors()))
    return 1


def handle_error(error: BaseException) -> int:
    for error_type, handler in _error_handlers:
        if isinstance(error, error_type):
            return handler(error)
    logger.debug('unexpected error', exc_info=error)
    _report('internal', f'{type(error).__name__}: {error}')
    return 1


"""
argument parsing
"""

class ArgumentParser(argparse.ArgumentParser):
    """raises UsageError instead of exiting, so bad flags go through the error handlers"""
    def error(self, message: str):
        raise UsageError(message)


def _common_flags() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='toml file of config keys')
    common.add_argument('--seed', type=int)
    common.add_argument('--out', type=Path, default=Path('results'), help='root of the result tree')
    common.add_argument('--overwrite', action='store_true', help='replace existing result files')
    common.add_argument('--verbose', action='store_true', help='debug logging')
    return common


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='task-superposition', description='superposition of in-context tasks in small transformers')
    parser.add_argument('--version', action='version', version=__version__)
    subcommands = parser.add_subparsers(dest='subcommand', required=True)
    common = _common_flags()

    train = subcommands.add_parser('train', parents=[common], help='train a desk-scale model on a task family')
    train.add_argument('--family', choices=['plus', 'retrieval'])
    train.add_argument('--steps', type=int)
    train.add_argument('--batch-size', dest='batch_size', type=int)
    train.add_argument('--learning-rate', dest='learning_rate', type=float)
    train.add_argument('--m-min', dest='m_min', type=int)
    train.add_argument('--m-max', dest='m_max', type=int)
    train.add_argument('--eval-m', dest='eval_m', type=int)
    train.add_argument('--workers', type=int)

    sweep = subcommands.add_parser('sweep', parents=[common], help='mixture ratio sweep of two tasks')
    sweep.add_argument('--ckpt', dest='checkpoint')
    sweep.add_argument('--tasks')
    sweep.add_argument('--grid', type=int)
    sweep.add_argument('--prompts-per-point', dest='prompts_per_point', type=int)
    sweep.add_argument('--m-total', dest='m_total', type=int)
    sweep.add_argument('--workers', type=int)

    construct = subcommands.add_parser('construct', parents=[common], help='build and verify the constructed model')
    construct.add_argument('--tasks')
    construct.add_argument('--n', type=int)
    construct.add_argument('--m', type=int)
    construct.add_argument('--C', dest='C', type=float)
    construct.add_argument('--C-threshold', dest='C_threshold', type=float)
    construct.add_argument('--relu-budget', dest='relu_budget', type=int)
    construct.add_argument('--d-model', dest='d_model', type=int)

    probe = subcommands.add_parser('probe', parents=[common], help='output distributions, coverage and KL')
    probe.add_argument('--ckpt', dest='checkpoint')
    probe.add_argument('--fixture')
    probe.add_argument('--prompts')
    probe.add_argument('--tasks')
    probe.add_argument('--distribution')
    probe.add_argument('--n-prompts', dest='n_prompts', type=int)
    probe.add_argument('--m-total', dest='m_total', type=int)
    probe.add_argument('--beam-width', dest='beam_width', type=int)

    taskvec = subcommands.add_parser('taskvec', parents=[common], help='task vectors and their interpolation')
    taskvec.add_argument('--ckpt', dest='checkpoint')
    taskvec.add_argument('--tasks')
    taskvec.add_argument('--n-prompts', dest='n_prompts', type=int)
    taskvec.add_argument('--m', type=int)
    taskvec.add_argument('--grid', type=int)
    taskvec.add_argument('--n-queries', dest='n_queries', type=int)
    taskvec.add_argument('--mixture')

    remote = subcommands.add_parser('remote', parents=[common], help='measurement protocol against a completion api')
    remote.add_argument('--setting')
    remote.add_argument('--fixture')
    remote.add_argument('--n-prompts', dest='n_prompts', type=int)
    remote.add_argument('--examples-per-task', dest='examples_per_task', type=int)
    remote.add_argument('--max-in-flight', dest='max_in_flight', type=int)
    remote.add_argument('--logprobs', type=int)

    runs = subcommands.add_parser('runs', help='list the most recent entries of the run ledger')
    runs.add_argument('--out', type=Path, default=Path('results'), help='root of the result tree')
    runs.add_argument('--last', type=int, default=10, help='number of entries')
    runs.add_argument('--verbose', action='store_true', help='debug logging')

    return parser


"""
running
"""

class ProgressBars:
    """one tqdm bar per running operation, fed by the progress events"""
    def __init__(self, enabled: bool) -> None:
        self.enabled = enabled
        self._bars: dict[str, tqdm] = {}

    def __call__(self, data: events.ProgressData) -> None:
        bar = self._bars.get(data.operation)
        if bar is None or bar.total != data.total or data.done <= bar.n:
            if bar is not None:
                bar.close()
            bar = self._bars[data.operation] = tqdm(total=data.total, desc=data.operation, disable=not self.enabled)
        bar.update(data.done - bar.n)
        if data.loss is not None:
            bar.set_postfix(loss=f'{data.loss:.4f}', refresh=False)
        if data.done >= data.total:
            bar.close()
            del self._bars[data.operation]

    def close(self) -> None:
        for bar in self._bars.values():
            bar.close()
        self._bars.clear()


@runlog.log_call('{config}', when='always')
def execute(subcommand: str, run_id: str, config, run: RunDirectory) -> None:
    try:
        RUNNERS[subcommand](config, run)
    finally:
        run.finish()


def show_runs(out: Path, last: int) -> int:
    """print the newest ledger entries of a result tree, newest first"""
    if last < 1:
        raise UsageError(f'--last must be at least 1, got {last}')
    path = out / 'runs.sqlite'
    if not path.is_file():
        raise UsageError(f'no run ledger at {path}')

    database = runlog.connect(path)
    try:
        records = runlog.fetch_log(num_entries=last)
    finally:
        database.close()
    for record in records:
        print(f'{record.timestamp:%Y-%m-%dT%H:%M:%S}Z {record.subcommand:<9} {record.run_id} '
              f'{record.status.name:<9} {record.duration:.2f}s')
    return 0


def run(argv: Sequence[str] | None = None) -> int:
    """parse argv, run the subcommand and return the exit status"""
    args = build_parser().parse_args(argv)
    logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.INFO)
    if args.subcommand == 'runs':
        return show_runs(args.out, args.last)

    overrides = {key: value for key, value in vars(args).items() if key in schemas[args.subcommand]}
    config = load_config(args.subcommand, args.config, overrides)
    directory = RunDirectory(args.out, args.subcommand, config, args.overwrite)
    logger.info('%s run %s in %s', args.subcommand, directory.run_id, directory.path)

    bars = ProgressBars(enabled=sys.stderr.isatty())
    events.progress.add_handler(bars)
    database = runlog.connect(args.out / 'runs.sqlite')
    try:
        execute(args.subcommand, directory.run_id, config, directory)
    finally:
        events.progress.remove_handler(bars)
        bars.close()
        database.close()
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO)
    try:
        return run(argv)
    except Exception as error:  # pylint: disable=broad-except
        return handle_error(error)

"""
result directories of command line runs

Results of a run go to `<out>/<subcommand>/<run-id>/`, the run id being a hash of the validated config.
Result files are written once; every file (or checkpoint directory) gets a `<name>.manifest.json`
with the config, seed, package version and wall time needed to reproduce it.
"""

import dataclasses
import json
import logging
import shutil
import time
from pathlib import Path

from . import __version__
from .errors import ArtifactExistsError
from .util import stable_hash

logger = logging.getLogger(__name__)


def run_id_of(config) -> str:
    return stable_hash(dataclasses.asdict(config))


class RunDirectory:
    def __init__(self, out: Path, subcommand: str, config, overwrite: bool = False) -> None:
        self.subcommand = subcommand
        self.config = config
        self.overwrite = overwrite
        self.run_id = run_id_of(config)
        self.path = out / subcommand / self.run_id
        self.path.mkdir(parents=True, exist_ok=True)
        self._started = time.perf_counter()
        self.written: list[str] = []

    def _claim(self, name: str) -> Path:
        path = self.path / name
        if path.exists():
            if not self.overwrite:
                raise ArtifactExistsError(f'{path} exists, pass --overwrite to replace it')
            logger.info('replacing %s', path)
            if path.is_dir():
                shutil.rmtree(path)
            else:
                path.unlink()
        return path

    def file(self, name: str) -> Path:
        """path of a new result file or directory, e.g. a checkpoint"""
        path = self._claim(name)
        self._claim(f'{name}.manifest.json')
        self.written.append(name)
        return path

    def finish(self) -> None:
        """write the manifests of every result of this run"""
        wall_time = time.perf_counter() - self._started
        for name in self.written:
            manifest = {
                'file': name,
                'subcommand': self.subcommand,
                'run_id': self.run_id,
                'config': dataclasses.asdict(self.config),
                'seed': getattr(self.config, 'seed', None),
                'version': __version__,
                'wall_time': wall_time,
            }
            (self.path / f'{name}.manifest.json').write_text(
                json.dumps(manifest, indent=2, sort_keys=True) + '\n', encoding='utf-8',
            )
        logger.info('wrote %d results to %s', len(self.written), self.path)


def write_json(path: Path, data: object) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + '\n', encoding='utf-8')

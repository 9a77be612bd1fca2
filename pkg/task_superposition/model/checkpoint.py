"""
checkpoint container: a utf-8 manifest plus one little-endian blob

manifest.txt holds one `key = value` record per line:
    format = task-superposition/1
    config.<field> = <json value>
    tensor.<name> = shape=<d0>,<d1>,... offset=<bytes> dtype=<f8
    meta.<key> = <json value>
tensors.bin holds the raw arrays back to back, in manifest order.
Nothing time dependent is written, so equal inputs give byte-identical files.
"""

import json
import logging
from pathlib import Path

import numpy as np

from ..errors import DimensionError, LabError
from .transformer import TransformerConfig, TransformerWeights, check_weights, expected_shapes

logger = logging.getLogger(__name__)

FORMAT = 'task-superposition/1'
MANIFEST = 'manifest.txt'
BLOB = 'tensors.bin'
_DTYPE = np.dtype('<f8')


class CheckpointError(LabError):
    category = 'io'


def write_container(
        directory: Path,
        tensors: dict[str, np.ndarray],
        config: dict[str, object] | None = None,
        meta: dict[str, object] | None = None,
        ) -> None:
    directory.mkdir(parents=True, exist_ok=True)

    lines = [f'format = {FORMAT}']
    for key, value in (config or {}).items():
        lines.append(f'config.{key} = {json.dumps(value)}')

    offset = 0
    chunks: list[bytes] = []
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
        shape = ','.join(str(d) for d in np.shape(array))
        lines.append(f'tensor.{name} = shape={shape} offset={offset} dtype={_DTYPE.str}')
        chunks.append(data)
        offset += len(data)

    for key, value in (meta or {}).items():
        lines.append(f'meta.{key} = {json.dumps(value)}')

    (directory / MANIFEST).write_text('\n'.join(lines) + '\n', encoding='utf-8', newline='\n')
    (directory / BLOB).write_bytes(b''.join(chunks))
    logger.debug('wrote %d tensors (%d bytes) to %s', len(tensors), offset, directory)


def read_container(directory: Path) -> tuple[dict[str, np.ndarray], dict[str, object], dict[str, object]]:
    """returns (tensors, config records, meta records)"""
    try:
        text = (directory / MANIFEST).read_text(encoding='utf-8')
        blob = (directory / BLOB).read_bytes()
    except OSError as err:
        raise CheckpointError(f'cannot read checkpoint at {directory}: {err}') from err

    tensors: dict[str, np.ndarray] = {}
    config: dict[str, object] = {}
    meta: dict[str, object] = {}
    seen_format = False

    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition(' = ')
        if not sep:
            raise CheckpointError(f'{MANIFEST}:{number}: expected "key = value", got {line!r}')

        kind, _, name = key.partition('.')
        match kind:
            case 'format':
                if value != FORMAT:
                    raise CheckpointError(f'unsupported checkpoint format {value!r}')
                seen_format = True
            case 'config':
                config[name] = json.loads(value)
            case 'meta':
                meta[name] = json.loads(value)
            case 'tensor':
                tensors[name] = _read_tensor(name, value, blob)
            case _:
                raise CheckpointError(f'{MANIFEST}:{number}: unknown record {key!r}')

    if not seen_format:
        raise CheckpointError(f'{directory / MANIFEST} has no format record')
    return tensors, config, meta


def _read_tensor(name: str, spec: str, blob: bytes) -> np.ndarray:
    fields = dict(part.split('=', 1) for part in spec.split())
    shape = tuple(int(d) for d in fields['shape'].split(',') if d)
    offset = int(fields['offset'])
    dtype = np.dtype(fields['dtype'])
    size = int(np.prod(shape)) * dtype.itemsize
    if offset + size > len(blob):
        raise CheckpointError(f'tensor {name} extends beyond the end of {BLOB}')
    return np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape).astype(np.float64)


def save_checkpoint(
        directory: Path,
        config: TransformerConfig,
        weights: TransformerWeights,
        meta: dict[str, object] | None = None,
        ) -> None:
    check_weights(weights, config)
    write_container(directory, weights.arrays(), config.model_dump(mode='json'), meta)


def load_checkpoint(directory: Path) -> tuple[TransformerConfig, TransformerWeights, dict[str, object]]:
    tensors, config_records, meta = read_container(directory)
    config = TransformerConfig(**config_records)

    shapes = expected_shapes(config)
    missing = set(shapes) - set(tensors)
    if missing:
        raise CheckpointError(f'checkpoint lacks tensors {sorted(missing)}')
    for name, shape in shapes.items():
        if tensors[name].shape != shape:
            raise DimensionError(f'tensor {name} has shape {tensors[name].shape}, manifest config requires {shape}')

    weights = TransformerWeights(**{name: tensors[name] for name in shapes})
    return config, weights, meta

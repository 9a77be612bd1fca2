"""
closed-form attention heads and mlp blocks of the superposition construction

Heads work directly in residual coordinates (d_head = d_model): W_Q and W_K map into the rows of
the position code, W_V and W_O copy one row range into another. No attention scaling is applied.
"""

from dataclasses import dataclass

import numpy as np

from ...errors import LayoutError, SpecError
from .layout import ResidualLayout, RowRange
from .plan import ConstructionTask


@dataclass
class AttentionHead:
    W_Q: np.ndarray  # (D, D)
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    provenance: str

    @classmethod
    def empty(cls, size: int, provenance: str) -> "AttentionHead":
        return cls(*(np.zeros((size, size)) for _ in range(4)), provenance=provenance)


@dataclass
class MlpBlock:
    W_in: np.ndarray   # (D, F)
    b_in: np.ndarray   # (F,)
    W_out: np.ndarray  # (F, D)
    b_out: np.ndarray  # (D,)
    provenance: str

    @property
    def units(self) -> int:
        return self.b_in.shape[0]

    @staticmethod
    def concat(blocks: list["MlpBlock"], size: int) -> "MlpBlock":
        """stack independent blocks side by side, i.e. a block-diagonal mlp"""
        if not blocks:
            return MlpBlock(np.zeros((size, 0)), np.zeros(0), np.zeros((0, size)), np.zeros(size), 'empty')
        return MlpBlock(
            W_in=np.concatenate([b.W_in for b in blocks], axis=1),
            b_in=np.concatenate([b.b_in for b in blocks]),
            W_out=np.concatenate([b.W_out for b in blocks], axis=0),
            b_out=np.sum([b.b_out for b in blocks], axis=0),
            provenance='; '.join(b.provenance for b in blocks),
        )


class _Units:
    """helper to add ReLU units one at a time"""

    def __init__(self, size: int) -> None:
        self.size = size
        self._in: list[np.ndarray] = []
        self._bias: list[float] = []
        self._out: list[np.ndarray] = []
        self.b_out = np.zeros(size)

    def add(self, reads: dict[int, float], writes: dict[int, float], bias: float = 0.0) -> None:
        w_in = np.zeros(self.size)
        for row, weight in reads.items():
            w_in[row] += weight
        w_out = np.zeros(self.size)
        for row, weight in writes.items():
            w_out[row] += weight
        self._in.append(w_in)
        self._bias.append(bias)
        self._out.append(w_out)

    def block(self, provenance: str) -> MlpBlock:
        if not self._in:
            return MlpBlock(np.zeros((self.size, 0)), np.zeros(0), np.zeros((0, self.size)), self.b_out, provenance)
        return MlpBlock(
            W_in=np.stack(self._in, axis=1),
            b_in=np.array(self._bias),
            W_out=np.stack(self._out, axis=0),
            b_out=self.b_out,
            provenance=provenance,
        )


def _match_positions(head: AttentionHead, query_code: RowRange, key_code: RowRange, C: float) -> None:
    """query code . key code, scaled by C; both codes are read into the coordinates of key_code"""
    if query_code.width != key_code.width:
        raise LayoutError(f'position codes of width {query_code.width} and {key_code.width} differ')
    for b in range(key_code.width):
        head.W_Q[query_code[b], key_code[b]] = C
        head.W_K[key_code[b], key_code[b]] = 1.0


def _move(head: AttentionHead, source: RowRange, target: RowRange, sign: float = 1.0) -> None:
    """value reads source rows, output adds them to target rows"""
    if source.width != target.width:
        raise LayoutError(f'cannot move {source.width} rows into {target.width}')
    for r in range(source.width):
        head.W_V[source[r], target[r]] = 1.0
        head.W_O[target[r], target[r]] = sign


def build_label_flag_layers(layout: ResidualLayout, C_attend: float) -> list[AttentionHead]:
    """
    Two heads moving the '=' flag one position to the right, onto the labels.
    Head one adds the flag of the previous position (query code of position - 1),
    head two subtracts the flag of the own position.
    """
    layout.require('flag', 'pos', 'shift1')
    pos, shift1, flag = layout.rows('pos'), layout.rows('shift1'), layout.rows('flag')

    shift = AttentionHead.empty(layout.size, 'flag: shift right')
    _match_positions(shift, shift1, pos, C_attend)
    _move(shift, flag, flag)

    clear = AttentionHead.empty(layout.size, 'flag: clear original')
    _match_positions(clear, pos, pos, C_attend)
    _move(clear, flag, flag, sign=-1.0)
    return [shift, clear]


@dataclass
class TaskStreamLayers:
    predict: MlpBlock         # gt = g(x) at every position
    shift: AttentionHead      # ga = gt from s positions before
    compare: MlpBlock         # diff = ga - x, l1 = |ga - x|_1
    query_shift: AttentionHead  # qp = gt from s - 1 positions before


def build_task_stream(task: ConstructionTask, layout: ResidualLayout, C_attend: float) -> TaskStreamLayers:
    """prediction, alignment and comparison layers of one task"""
    stream = task.name
    rows = {r: layout.stream_rows(stream, r) for r in ('gt', 'ga', 'diff', 'l1', 'qp', 'shift', 'query_shift')}
    layout.require('x', 'one', 'pos')
    x, one, pos = layout.rows('x'), layout.rows('one')[0], layout.rows('pos')

    units = _Units(layout.size)
    if task.is_copy:
        for r in range(x.width):
            units.add({x[r]: 1.0}, {rows['gt'][r]: 1.0})
            units.add({x[r]: -1.0}, {rows['gt'][r]: -1.0})
    else:
        if task.relus is None:
            raise SpecError(f'functional task {stream} has no fitted sum of ReLUs')
        for c, a in zip(task.relus.coefficients, task.relus.directions):
            units.add({x[0]: a[0], one: a[-1]}, {rows['gt'][0]: c})
    predict = units.block(f'{stream}: prediction g(x)')

    shift = AttentionHead.empty(layout.size, f'{stream}: move prediction onto labels')
    _match_positions(shift, rows['shift'], pos, C_attend)
    _move(shift, rows['gt'], rows['ga'])

    units = _Units(layout.size)
    for r in range(x.width):
        units.add({rows['ga'][r]: 1.0, x[r]: -1.0}, {rows['diff'][r]: 1.0, rows['l1'][0]: 1.0})
        units.add({rows['ga'][r]: -1.0, x[r]: 1.0}, {rows['diff'][r]: -1.0, rows['l1'][0]: 1.0})
    compare = units.block(f'{stream}: difference and L1 norm')

    query_shift = AttentionHead.empty(layout.size, f'{stream}: move query prediction to the end')
    _match_positions(query_shift, rows['query_shift'], pos, C_attend)
    _move(query_shift, rows['gt'], rows['qp'])

    return TaskStreamLayers(predict, shift, compare, query_shift)


def build_threshold_mlp(stream: str, C: float, layout: ResidualLayout, clean_constant: float) -> MlpBlock:
    """
    ind = ReLU(b - C z) from the flag b and the raw L1 norm z.
    In the same block z becomes z + 1 - ReLU(z - K b) - ReLU(K b - K + 1), which keeps z on labels
    and sets it to 1 elsewhere, for any K above the largest z.
    """
    layout.require('flag', 'one')
    flag, one = layout.rows('flag')[0], layout.rows('one')[0]
    l1, ind = layout.stream_rows(stream, 'l1')[0], layout.stream_rows(stream, 'ind')[0]
    K = clean_constant

    units = _Units(layout.size)
    units.add({flag: 1.0, l1: -C}, {ind: 1.0})
    units.add({l1: 1.0, flag: -K}, {l1: -1.0})
    units.add({flag: K, one: 1.0 - K}, {l1: -1.0})
    units.b_out[l1] = 1.0
    return units.block(f'{stream}: threshold and cleanup')


def build_proportion_attention(stream: str, layout: ResidualLayout, C_attend: float) -> AttentionHead:
    """attend with logit C on every label, average the indicators into prop"""
    layout.require('one', 'flag')
    one, flag = layout.rows('one')[0], layout.rows('flag')[0]

    head = AttentionHead.empty(layout.size, f'{stream}: proportion of matching labels')
    head.W_Q[one, flag] = C_attend
    head.W_K[flag, flag] = 1.0
    _move(head, layout.stream_rows(stream, 'ind'), layout.stream_rows(stream, 'prop'))
    return head


def build_execution_layers(
        stream: str, C: float, layout: ResidualLayout, prediction_bound: float,
        ) -> tuple[MlpBlock, AttentionHead]:
    """
    The mlp writes score = p at the final position, 1 - p at the one before and -C elsewhere,
    and stages fx = [f(x_query), 1] at the final position only (|f| < B).
    The head then attends with the score as logit and copies fx, so out = w [f(x_query), 1]
    with w = e^p / (e^p + e^(1-p) + (L - 2) e^-C).
    """
    layout.require('one', 'final', 'penult')
    one, final, penult = layout.rows('one')[0], layout.rows('final')[0], layout.rows('penult')[0]
    prop, score = layout.stream_rows(stream, 'prop')[0], layout.stream_rows(stream, 'score')[0]
    qp, fx, out = (layout.stream_rows(stream, r) for r in ('qp', 'fx', 'out'))
    B = prediction_bound

    units = _Units(layout.size)
    units.add({prop: 1.0, final: 1.0, one: -1.0}, {score: 1.0})
    units.add({penult: 1.0, prop: -1.0}, {score: 1.0})
    units.add({final: 1.0}, {score: C, fx[fx.width - 1]: 1.0})
    units.add({penult: 1.0}, {score: C})
    units.b_out[score] = -C
    for r in range(qp.width):
        units.add({qp[r]: 1.0, final: B, one: -B}, {fx[r]: 1.0})
        units.add({qp[r]: -1.0, final: B, one: -B}, {fx[r]: -1.0})
    mlp = units.block(f'{stream}: execution scores')

    head = AttentionHead.empty(layout.size, f'{stream}: weighted execution')
    head.W_Q[one, score] = 1.0
    head.W_K[score, score] = 1.0
    _move(head, fx, out)
    return mlp, head

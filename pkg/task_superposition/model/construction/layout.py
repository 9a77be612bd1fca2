"""
named row ranges of the residual stream of a constructed model

Shared rows (written by the embeddings or the flag layer):
    x        value of the token (d rows)
    flag     1 at '=' tokens, moved to the label positions by the first layer
    one      constant 1
    pos      +-1 binary code of the position
    shift1   code of position - 1 (zero at position 0)
    final    1 at the last position of the prompt
    penult   1 at the second to last position
Rows per task stream <name>.:
    shift, query_shift   codes of position - s and position - (s - 1)
    gt       the stream's prediction g(x) at every position (d rows)
    ga       prediction of the example input, moved to the label position (d rows)
    diff     ga - x (d rows)
    l1       L1 norm of diff, cleaned to 1 away from labels
    ind      1 where the label matches the task
    prop     proportion of matching labels
    qp       prediction of the query input, moved to the final position (d rows)
    score    execution logits: p at the final position, 1 - p at the one before, -C elsewhere
    fx       [prediction, 1] at the final position, 0 elsewhere (d + 1 rows)
    out      weighted output [w f(x), w] (d + 1 rows)
"""

from dataclasses import dataclass

from ...errors import LayoutError

SHARED_ROWS = ('x', 'flag', 'one', 'pos', 'shift1', 'final', 'penult')
STREAM_ROWS = ('shift', 'query_shift', 'gt', 'ga', 'diff', 'l1', 'ind', 'prop', 'qp', 'score', 'fx', 'out')


@dataclass(frozen=True)
class RowRange:
    start: int
    stop: int

    @property
    def width(self) -> int:
        return self.stop - self.start

    def __iter__(self):
        return iter(range(self.start, self.stop))

    def __getitem__(self, index: int) -> int:
        if not 0 <= index < self.width:
            raise LayoutError(f'row {index} outside range of width {self.width}')
        return self.start + index


class ResidualLayout:
    """ordered, disjoint row ranges; unused rows up to `size` are scratch"""

    def __init__(self) -> None:
        self._ranges: dict[str, RowRange] = {}
        self._used = 0
        self.size = 0
        self.streams: list[str] = []

    def add(self, name: str, width: int) -> RowRange:
        if name in self._ranges:
            raise LayoutError(f'rows {name!r} already allocated')
        if width < 1:
            raise LayoutError(f'rows {name!r} need a positive width, got {width}')
        rows = RowRange(self._used, self._used + width)
        self._ranges[name] = rows
        self._used += width
        self.size = max(self.size, self._used)
        return rows

    def add_stream(self, stream: str, d: int, code_width: int) -> None:
        widths = {
            'shift': code_width, 'query_shift': code_width,
            'gt': d, 'ga': d, 'diff': d, 'l1': 1, 'ind': 1, 'prop': 1,
            'qp': d, 'score': 1, 'fx': d + 1, 'out': d + 1,
        }
        for row in STREAM_ROWS:
            self.add(f'{stream}.{row}', widths[row])
        self.streams.append(stream)

    @property
    def used(self) -> int:
        return self._used

    def pad_to(self, size: int) -> None:
        """declare scratch rows up to size"""
        if size < self._used:
            raise LayoutError(f'cannot shrink layout of {self._used} rows to {size}')
        self.size = size

    def __contains__(self, name: str) -> bool:
        return name in self._ranges

    def rows(self, name: str) -> RowRange:
        try:
            return self._ranges[name]
        except KeyError:
            raise LayoutError(f'layout has no rows named {name!r}') from None

    def stream_rows(self, stream: str, row: str) -> RowRange:
        return self.rows(f'{stream}.{row}')

    def require(self, *names: str) -> None:
        missing = [n for n in names if n not in self._ranges]
        if missing:
            raise LayoutError(f'layout is missing rows {missing}')

    def items(self):
        return self._ranges.items()

    def report(self) -> str:
        lines = [f'residual rows: {self._used} used of {self.size}']
        for name, rows in self._ranges.items():
            lines.append(f'  {rows.start:5d}..{rows.stop - 1:5d}  {name}')
        if self.size > self._used:
            lines.append(f'  {self._used:5d}..{self.size - 1:5d}  scratch')
        return '\n'.join(lines)

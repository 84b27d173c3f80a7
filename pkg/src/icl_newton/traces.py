"""Layer-indexed prediction dumps (model,layer,seq_id,t,prediction).

A dump row holds the prediction of x_{t+1} from the first t examples of
sequence ``seq_id`` at the given layer (or algorithm step).  Imported dumps
become :class:`AlgorithmHandle` objects whose step axis is the layer index,
so they can be compared with the reference solvers.
"""
from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np

from .errors import FormatError, SeqMismatch, SparseTrace
from .report import csv_text, read_csv, write_text
from .similarity import AlgorithmHandle
from .taskgen import TaskInstance

HEADER = ["model", "layer", "seq_id", "t", "prediction"]


def export_traces(handles: dict[str, AlgorithmHandle] | Sequence[AlgorithmHandle], tasks: Sequence[TaskInstance],
                  path=None) -> str:
    """Dump next-example predictions of every step of every handle."""
    if not isinstance(handles, dict):
        handles = {h.id: h for h in handles}
    rows = []
    for name, handle in handles.items():
        preds = handle.next_example_predictions(tasks)
        for row, layer in enumerate(handle.step_labels):
            for seq in range(len(tasks)):
                for t in range(preds.shape[2]):
                    rows.append((name, layer, seq, t + 1, preds[row, seq, t]))
    text = csv_text(HEADER, rows)
    if path is not None:
        write_text(path, text)
    return text


def _batch_key(tasks: Sequence[TaskInstance]) -> tuple:
    return tuple((task.seed, task.n_examples, task.dim) for task in tasks)


def import_traces(path, tasks: Sequence[TaskInstance]) -> dict[str, AlgorithmHandle]:
    """Wrap every model in a dump as a handle aligned with ``tasks``."""
    header, rows = read_csv(path)
    if [h.strip() for h in header] != HEADER:
        raise FormatError(f"expected header {','.join(HEADER)}, got {','.join(header)}")
    n_seq = len(tasks)
    if n_seq == 0:
        raise SeqMismatch("no task batch to align the dump with")
    n = tasks[0].n_examples
    if any(task.n_examples != n for task in tasks):
        raise SeqMismatch("all tasks in the batch must share n")
    cells: dict[str, dict[int, dict[tuple[int, int], float]]] = defaultdict(lambda: defaultdict(dict))
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(HEADER):
            raise FormatError(f"line {lineno}: expected {len(HEADER)} fields")
        try:
            model, layer, seq, t, pred = row[0], int(row[1]), int(row[2]), int(row[3]), float(row[4])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
        if not 0 <= seq < n_seq:
            raise SeqMismatch(f"line {lineno}: seq_id {seq} outside the batch of {n_seq}")
        if not 1 <= t <= n:
            raise SeqMismatch(f"line {lineno}: t={t} outside 1..{n}")
        if (seq, t) in cells[model][layer]:
            raise FormatError(f"line {lineno}: duplicate cell ({model}, {layer}, {seq}, {t})")
        cells[model][layer][(seq, t)] = pred

    key = _batch_key(tasks)
    handles = {}
    for model, by_layer in cells.items():
        layers = tuple(sorted(by_layer))
        table = np.full((len(layers), n_seq, n), np.nan)
        for i, layer in enumerate(layers):
            got = by_layer[layer]
            if len(got) != n_seq * n:
                missing = next((s, t) for s in range(n_seq) for t in range(1, n + 1) if (s, t) not in got)
                raise SparseTrace(f"{model} layer {layer}: missing seq_id={missing[0]}, t={missing[1]}")
            for (seq, t), pred in got.items():
                table[i, seq, t - 1] = pred
        table.setflags(write=False)
        handles[model] = AlgorithmHandle(model, layers[-1], None, _lookup(model, table, key), layers)
    return handles


def _lookup(model: str, table: np.ndarray, key: tuple):
    def query(tasks: Sequence[TaskInstance]) -> np.ndarray:
        if _batch_key(tasks) != key:
            raise SeqMismatch(f"{model} was imported for a different task batch")
        return table

    return query

"""Tables, line-delimited records and plots written into run directories."""
import json
import logging
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOGGER = logging.getLogger(__name__)


def write_json(data, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as out:
        json.dump(data, out, indent=2, sort_keys=True)
    return path


def append_jsonl(record, path):
    with open(path, 'a') as out:
        out.write(json.dumps(record, sort_keys=True) + '\n')


def read_jsonl(path):
    with open(path) as source:
        return [json.loads(line) for line in source if line.strip()]


def _cell(value):
    if isinstance(value, float):
        return '{:.4f}'.format(value)
    return str(value)


def format_table(rows, columns):
    """
    Plain text table

    :param rows: list of dicts
    :param columns: keys to show, in order
    """
    cells = [[_cell(row.get(column, '')) for column in columns] for row in rows]
    widths = [max([len(column)] + [len(line[i]) for line in cells]) for i, column in enumerate(columns)]
    lines = ['  '.join(column.ljust(widths[i]) for i, column in enumerate(columns)),
             '  '.join('-' * width for width in widths)]
    lines += ['  '.join(cell.ljust(widths[i]) for i, cell in enumerate(line)) for line in cells]
    return '\n'.join(lines) + '\n'


def write_table(rows, columns, path):
    """Tab-separated table file."""
    path = Path(path)
    with open(path, 'w') as out:
        out.write('\t'.join(columns) + '\n')
        for row in rows:
            out.write('\t'.join(_cell(row.get(column, '')) for column in columns) + '\n')
    return path


def plot_curves(x, curves, path, xlabel, ylabel='Top-1 accuracy', title=None, categorical=False):
    """
    Line plot of one or more curves

    :param x: x values (labels when categorical)
    :param curves: dict name -> y values
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    positions = np.arange(len(x)) if categorical else x
    for name, values in curves.items():
        ax.plot(positions, values, marker='o', label=name)
    if categorical:
        ax.set_xticks(positions)
        ax.set_xticklabels([str(v) for v in x], rotation=20)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1.05)
    if title:
        ax.set_title(title)
    if len(curves) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(str(path), dpi=100)
    plt.close(fig)
    return Path(path)


def plot_confusion(confusion, classes, path):
    confusion = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(1 + 0.5 * len(classes), 1 + 0.5 * len(classes)))
    ax.imshow(confusion, cmap='Blues')
    ax.set_xticks(range(len(classes)))
    ax.set_yticks(range(len(classes)))
    ax.set_xticklabels(classes, rotation=90)
    ax.set_yticklabels(classes)
    ax.set_xlabel('predicted')
    ax.set_ylabel('true')
    for (row, col), count in np.ndenumerate(confusion):
        ax.text(col, row, int(count), ha='center', va='center', fontsize=8)
    fig.tight_layout()
    fig.savefig(str(path), dpi=100)
    plt.close(fig)
    return Path(path)

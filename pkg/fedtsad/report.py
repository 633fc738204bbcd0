"""
Tables and figures from result records. Tables have one row per (dataset, regime) and one column per
(detector, metric); every metric column has a `<column>_rank` companion flagging the best and second best
value within the dataset block.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .dataset import DATASET_NAMES  # noqa: E402
from .runner import ResultsRecord, default_partition  # noqa: E402

logger = logging.getLogger(__name__)

DETECTORS = ('DeepSVDD', 'LSTM_AE', 'USAD', 'GDN', 'TranAD')
FEDERATED = ('FedAvg', 'FedProx', 'SCAFFOLD', 'MOON')
REGIMES = ('Original',) + FEDERATED
REGIME_NAMES = {'Centralized': 'Original', 'Isolated': 'Isolated',
                'FedAvg': 'FedAvg', 'FedProx': 'FedProx', 'SCAFFOLD': 'SCAFFOLD', 'MOON': 'MOON'}
TABLES: Dict[str, Tuple[str, ...]] = {'auc_table': ('auc_roc', 'auc_pr'),
                                      'pr_table': ('precision_adj', 'recall_adj'),
                                      'f1_table': ('f1', 'f1_adj'),
                                      'time_table': ('seconds',)}
FIGURES = ('beta_figure', 'isolation_figure')
REPORT_KINDS = tuple(TABLES) + FIGURES
FIGURE_METRICS = ('auc_roc', 'auc_pr', 'f1', 'f1_adj')
METRICS = ('auc_roc', 'auc_pr', 'precision', 'recall', 'f1', 'precision_adj', 'recall_adj', 'f1_adj')


def partition_label(scheme: str,
                    beta: float
                    ) -> str:
    if scheme == 'dirichlet_contiguous':
        return f'beta={beta:g}'
    return scheme


def records_frame(records: Sequence[ResultsRecord]
                  ) -> pd.DataFrame:
    """ One row per successful record with its identifying fields, metrics and mean seconds per global epoch.
    """
    rows = []
    for record in records:
        if not record.ok or record.result is None:
            continue
        config = record.config
        rows.append({'dataset': config['dataset'],
                     'model': config['model']['kind'],
                     'regime': REGIME_NAMES[config['federation']['strategy']],
                     'scheme': config['partition']['scheme'],
                     'beta': config['partition']['beta'],
                     'n_clients': config['partition']['n_clients'],
                     'seed': record.seed,
                     **{m: record.result[m] for m in METRICS},
                     'seconds': float(np.mean(record.round_seconds)) if record.round_seconds else np.nan})
    columns = ['dataset', 'model', 'regime', 'scheme', 'beta', 'n_clients', 'seed', *METRICS, 'seconds']
    return pd.DataFrame(rows, columns=columns)


def _main_setting(frame: pd.DataFrame) -> pd.DataFrame:
    # the partition each dataset is reported with; Original pools all data so its partition is irrelevant,
    # Isolated is compared with the federated regimes on the same partition
    keep = []
    for _, row in frame.iterrows():
        default = default_partition(row['dataset'])
        keep.append(row['regime'] == 'Original' or
                    (row['scheme'] == default.scheme and row['n_clients'] == default.n_clients and
                     (default.scheme != 'dirichlet_contiguous' or row['beta'] == default.beta)))
    return frame[np.array(keep, dtype=bool)] if len(frame) else frame


def rank_flags(values: Sequence[float],
               higher_is_better: bool = True
               ) -> List[str]:
    """ 'best' and 'second' for the top two values, '' elsewhere; missing values are never ranked.
    Equal values keep their order.
    """
    values = np.asarray(values, dtype=np.float64)
    present = [i for i in range(len(values)) if not np.isnan(values[i])]
    ordered = sorted(present, key=lambda i: -values[i] if higher_is_better else values[i])
    flags = [''] * len(values)
    for flag, i in zip(('best', 'second'), ordered):
        flags[i] = flag
    return flags


def build_table(records: Sequence[ResultsRecord],
                kind: str,
                models: Sequence[str] = DETECTORS
                ) -> Tuple[pd.DataFrame, List[str]]:
    """ The table of kind and the cells no record covers.
    """
    metrics = TABLES[kind]
    higher_is_better = kind != 'time_table'
    regimes = REGIMES + ('Isolated',) if kind == 'time_table' else REGIMES
    frame = _main_setting(records_frame(records))
    means = frame.groupby(['dataset', 'regime', 'model'])[list(metrics)].mean() if len(frame) else None

    columns = ['dataset', 'regime']
    for model in models:
        for metric in metrics:
            columns += [f'{model}_{metric}', f'{model}_{metric}_rank']
    datasets = [d for d in DATASET_NAMES if d in set(frame['dataset'])]

    rows, missing = [], []
    for dataset in datasets:
        block = []
        for regime in regimes:
            row = {'dataset': dataset, 'regime': regime}
            for model in models:
                key = (dataset, regime, model)
                covered = means is not None and key in means.index
                if not covered:
                    missing.append(f'{dataset},{regime},{model}')
                for metric in metrics:
                    row[f'{model}_{metric}'] = float(means.loc[key, metric]) if covered else np.nan
            block.append(row)
        for model in models:
            for metric in metrics:
                column = f'{model}_{metric}'
                for row, flag in zip(block, rank_flags([r[column] for r in block], higher_is_better)):
                    row[f'{column}_rank'] = flag
        rows += block
    return pd.DataFrame(rows, columns=columns), missing


def _bar_chart(data: pd.DataFrame,
               group: str,
               series: str,
               path: Path,
               title: str
               ) -> None:
    fig, axes = plt.subplots(1, len(FIGURE_METRICS), figsize=(4 * len(FIGURE_METRICS), 3.5), squeeze=False)
    for ax, metric in zip(axes[0], FIGURE_METRICS):
        if len(data):
            data.pivot_table(index=group, columns=series, values=metric).plot.bar(ax=ax, rot=0, legend=False)
        ax.set_title(metric)
        ax.set_ylim(0, 1)
    handles, labels = axes[0][0].get_legend_handles_labels()
    if handles:
        fig.legend(handles, labels, loc='upper right')
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def beta_figure_data(records: Sequence[ResultsRecord],
                     dataset: str = 'PSM',
                     model: str = 'USAD'
                     ) -> Tuple[pd.DataFrame, List[str]]:
    """ Federated regimes of one detector across the equal and Dirichlet partitions.
    """
    frame = records_frame(records)
    frame = frame[(frame['dataset'] == dataset) & (frame['model'] == model) & frame['regime'].isin(FEDERATED)]
    frame = frame.assign(partition=[partition_label(s, b) for s, b in zip(frame['scheme'], frame['beta'])])
    data = frame.groupby(['regime', 'partition'], as_index=False)[list(FIGURE_METRICS)].mean() if len(frame) \
        else pd.DataFrame(columns=['regime', 'partition', *FIGURE_METRICS])
    expected = ['equal', 'beta=0.1', 'beta=0.5', 'beta=5']
    present = set(zip(data['regime'], data['partition']))
    missing = [f'{dataset},{regime},{model},{p}' for regime in FEDERATED for p in expected
               if (regime, p) not in present]
    return data[['regime', 'partition', *FIGURE_METRICS]], missing


def isolation_figure_data(records: Sequence[ResultsRecord]
                          ) -> Tuple[pd.DataFrame, List[str]]:
    """ Isolated training against every federated regime, per dataset and detector.
    """
    frame = _main_setting(records_frame(records))
    frame = frame[frame['regime'].isin(('Isolated',) + FEDERATED)]
    data = frame.groupby(['dataset', 'model', 'regime'], as_index=False)[list(FIGURE_METRICS)].mean() if len(frame) \
        else pd.DataFrame(columns=['dataset', 'model', 'regime', *FIGURE_METRICS])
    present = set(zip(data['dataset'], data['model'], data['regime']))
    pairs = sorted(set(zip(data['dataset'], data['model'])))
    missing = [f'{d},{regime},{m}' for d, m in pairs for regime in ('Isolated',) + FEDERATED
               if (d, m, regime) not in present]
    return data[['dataset', 'model', 'regime', *FIGURE_METRICS]], missing


def emit_report(records: Sequence[ResultsRecord],
                kind: str,
                out_dir: Union[str, Path],
                models: Sequence[str] = DETECTORS
                ) -> List[Path]:
    """ Write the report of kind into out_dir.

    Args:
        records: result records, failed ones are ignored
        kind: auc_table, pr_table, f1_table, time_table, beta_figure or isolation_figure
        out_dir: output directory
        models: detector columns of the tables

    Returns: paths written: <kind>.csv, <kind>_missing_cells.txt and, for figures, <kind>.png

    """
    if kind not in REPORT_KINDS:
        raise ValueError(f'kind is expected to be one of {REPORT_KINDS}, but got {kind=}.')
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f'{kind}.csv', out_dir / f'{kind}_missing_cells.txt']

    if kind in TABLES:
        data, missing = build_table(records, kind, models)
    elif kind == 'beta_figure':
        data, missing = beta_figure_data(records)
    else:
        data, missing = isolation_figure_data(records)

    data.to_csv(paths[0], index=False)
    paths[1].write_text(''.join(f'{cell}\n' for cell in missing))
    if missing:
        logger.warning(f'{kind}: {len(missing)} missing cells, listed in {paths[1]}')

    if kind == 'beta_figure':
        paths.append(out_dir / f'{kind}.png')
        _bar_chart(data, 'regime', 'partition', paths[-1], 'USAD on PSM by partition')
    elif kind == 'isolation_figure':
        paths.append(out_dir / f'{kind}.png')
        labelled = data.assign(entity=data['dataset'] + '/' + data['model'])
        _bar_chart(labelled, 'entity', 'regime', paths[-1], 'Isolated vs federated training')
    return paths

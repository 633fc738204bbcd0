"""
Command line ::

    fedtsad run --dataset psm --model usad --fl fedavg --partition dirichlet --beta 0.5 --clients 24 --smoke
    fedtsad grid --config grid.yaml --out results
    fedtsad report --kind auc_table --kind f1_table --results results

Run flags such as `--dataset` and `--smoke` belong to the `run` subcommand, not to `fedtsad` itself.
`run` and `grid` exit with 2 when a run fails and print the failed stage.
"""
import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from .report import REPORT_KINDS, emit_report
from .runner import (DATASET_ALIASES, MODEL_ALIASES, SCHEME_ALIASES, STRATEGY_ALIASES, ExperimentConfigError,
                     GridSpec, ResultStore, ResultsRecord, config_from_sections, load_config_file, run_grid)
from .utils import setup_logging


def _set(sections: Dict[str, Any],
         section: str,
         key: str,
         value: Any
         ) -> None:
    if value is not None:
        sections.setdefault(section, {})
        if not isinstance(sections[section], dict):
            sections[section] = {'name': sections[section]}
        sections[section][key] = value


def _sections_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    sections = load_config_file(args.config) if args.config else {}
    _set(sections, 'dataset', 'name', args.dataset)
    _set(sections, 'dataset', 'root', args.data_root)
    _set(sections, 'model', 'kind', args.model)
    _set(sections, 'federation', 'strategy', args.fl)
    _set(sections, 'federation', 'global_epochs', args.global_epochs)
    _set(sections, 'federation', 'local_epochs', args.local_epochs)
    _set(sections, 'federation', 'max_workers', args.max_workers)
    _set(sections, 'partition', 'scheme', args.partition)
    _set(sections, 'partition', 'n_clients', args.clients)
    _set(sections, 'partition', 'beta', args.beta)
    _set(sections, 'runner', 'seed', args.seed)
    _set(sections, 'runner', 'output_dir', args.out)
    _set(sections, 'runner', 'repeats', args.repeats)
    if args.smoke:
        _set(sections, 'runner', 'smoke', True)
    return sections


def _report_failures(records: List[ResultsRecord]) -> int:
    failed = [r for r in records if not r.ok]
    for r in failed:
        print(f'{r.config["dataset"]}/{r.config["model"]["kind"]}/{r.config["federation"]["strategy"]} '
              f'seed={r.seed} failed at stage {r.stage}: {r.error}', file=sys.stderr)
    return 2 if failed else 0


def _summary(records: List[ResultsRecord]) -> None:
    for r in records:
        if r.ok:
            result = r.result
            print(f'{r.config["dataset"]}/{r.config["model"]["kind"]}/{r.config["federation"]["strategy"]} '
                  f'seed={r.seed} auc_roc={result["auc_roc"]:.4f} auc_pr={result["auc_pr"]:.4f} '
                  f'f1={result["f1"]:.4f} f1_adj={result["f1_adj"]:.4f}')


def _run(args: argparse.Namespace) -> int:
    cfg = config_from_sections(_sections_from_args(args))
    store = ResultStore(cfg.output_dir)
    records = run_grid([(cfg, cfg.seed + r) for r in range(cfg.repeats)], store,
                       disable_progress=cfg.repeats == 1)
    _summary(records)
    return _report_failures(records)


def _grid(args: argparse.Namespace) -> int:
    spec = GridSpec.from_dict(load_config_file(args.config))
    if args.out:
        spec = replace(spec, base=replace(spec.base, output_dir=args.out))
    store = ResultStore(spec.base.output_dir)
    records = run_grid(spec, store, max_workers=args.max_workers)
    _summary(records)
    return _report_failures(records)


def _report(args: argparse.Namespace) -> int:
    records = ResultStore(args.results).load()
    out = Path(args.out) if args.out else Path(args.results) / 'reports'
    for kind in args.kind:
        for path in emit_report(records, kind, out):
            print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='fedtsad', description='Federated time-series anomaly detection benchmark')
    parser.add_argument('--log-level', default='INFO')
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='run one experiment')
    run.add_argument('--config', help='YAML file with sections dataset, model, federation, partition, runner')
    run.add_argument('--dataset', choices=sorted(DATASET_ALIASES))
    run.add_argument('--data-root')
    run.add_argument('--model', choices=sorted(MODEL_ALIASES))
    run.add_argument('--fl', choices=sorted(STRATEGY_ALIASES))
    run.add_argument('--clients', type=int)
    run.add_argument('--beta', type=float)
    run.add_argument('--partition', choices=sorted(set(SCHEME_ALIASES) - {'dirichlet_contiguous'}))
    run.add_argument('--global-epochs', type=int)
    run.add_argument('--local-epochs', type=int, help='default 10')
    run.add_argument('--seed', type=int)
    run.add_argument('--repeats', type=int)
    run.add_argument('--max-workers', type=int, help='clients trained in parallel')
    run.add_argument('--out')
    run.add_argument('--smoke', action='store_true', help='at most 2000 training rows, small models, 3 global epochs')
    run.set_defaults(func=_run)

    grid = commands.add_parser('grid', help='run a grid of experiments, skipping completed ones')
    grid.add_argument('--config', required=True)
    grid.add_argument('--out')
    grid.add_argument('--max-workers', type=int, help='experiments run in parallel')
    grid.set_defaults(func=_grid)

    report = commands.add_parser('report', help='tables and figures from a results directory')
    report.add_argument('--kind', action='append', choices=REPORT_KINDS, required=True)
    report.add_argument('--results', required=True)
    report.add_argument('--out')
    report.set_defaults(func=_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level.upper())
    try:
        return args.func(args)
    except ExperimentConfigError as e:
        print(f'invalid config: {e}', file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(main())

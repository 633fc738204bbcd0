"""
Experiment orchestration: load -> normalize -> partition -> train -> score -> evaluate, persisted as one JSON
line per (config fingerprint, seed) so that a grid can be resumed.
"""
from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import product
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from tqdm import tqdm

from .dataset import DATASET_GEOMETRY, DEFAULT_WINDOW_LEN, load_dataset, make_test_windows, normalize, truncate
from .federation import FederationConfig, TrainingResult, run_training
from .metrics import EvaluationResult, average_results, evaluate
from .models import ModelConfig, calibrate, score_series
from .params import ParameterSet
from .partition import PartitionConfig, build_client_data, partition

logger = logging.getLogger(__name__)

STAGES = ('load', 'normalize', 'partition', 'train', 'score', 'evaluate')
RESULTS_FILE = 'results.jsonl'

# command-line spellings
DATASET_ALIASES = {'smd': 'SMD', 'smap': 'SMAP', 'psm': 'PSM'}
MODEL_ALIASES = {'deepsvdd': 'DeepSVDD', 'lstmae': 'LSTM_AE', 'usad': 'USAD', 'gdn': 'GDN', 'tranad': 'TranAD'}
STRATEGY_ALIASES = {'central': 'Centralized', 'isolated': 'Isolated', 'fedavg': 'FedAvg', 'fedprox': 'FedProx',
                    'scaffold': 'SCAFFOLD', 'moon': 'MOON'}
SCHEME_ALIASES = {'per_series': 'per_series', 'dirichlet': 'dirichlet_contiguous',
                  'dirichlet_contiguous': 'dirichlet_contiguous', 'equal': 'equal'}

SMOKE_MAX_TRAIN_ROWS = 2000
SMOKE_HIDDEN, SMOKE_LATENT, SMOKE_GLOBAL_EPOCHS = 8, 4, 3

# not part of a run's identity
_UNFINGERPRINTED = {'seed', 'output_dir', 'data_root', 'max_workers', 'disable_progress'}


class ExperimentConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self,
                 stage: str,
                 cause: BaseException
                 ) -> None:
        super().__init__(f'{stage} failed: {type(cause).__name__}: {cause}')
        self.stage = stage
        self.cause = cause


def canonical(name: str,
              aliases: Dict[str, str]
              ) -> str:
    if name in aliases.values():
        return name
    if name.lower() in aliases:
        return aliases[name.lower()]
    raise ExperimentConfigError(f'{name=} is not one of {sorted(aliases)}.')


def default_partition(dataset: str,
                      seed: int = 0
                      ) -> PartitionConfig:
    """ One client per series for SMD and SMAP; PSM's single series in 24 Dirichlet(0.5) blocks.
    """
    n_series, _, n_clients = DATASET_GEOMETRY[dataset]
    if n_series > 1:
        return PartitionConfig('per_series', n_clients=n_clients, seed=seed)
    return PartitionConfig('dirichlet_contiguous', beta=0.5, n_clients=n_clients, seed=seed)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = 'PSM'
    data_root: str = 'data'
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    partition: PartitionConfig = field(default_factory=lambda: default_partition('PSM'))
    output_dir: str = 'results'
    repeats: int = 1
    seed: int = 0
    smoke: bool = False
    max_train_rows: Optional[int] = None
    window_stride: int = 1
    strict_geometry: bool = True

    def validate(self) -> None:
        if self.dataset not in DATASET_GEOMETRY:
            raise ExperimentConfigError(f'dataset is expected to be one of {tuple(DATASET_GEOMETRY)}, '
                                        f'but got {self.dataset=}.')
        try:
            self.model.validate()
            self.federation.validate()
            self.partition.validate()
        except ValueError as e:
            raise ExperimentConfigError(str(e)) from e
        if self.strict_geometry and self.model.input_dims != DATASET_GEOMETRY[self.dataset][1]:
            raise ExperimentConfigError(f'{self.dataset} has {DATASET_GEOMETRY[self.dataset][1]} dims, '
                                        f'but got {self.model.input_dims=}.')
        if self.partition.scheme == 'per_series' and self.strict_geometry \
                and self.partition.n_clients != DATASET_GEOMETRY[self.dataset][0]:
            raise ExperimentConfigError(f'per_series on {self.dataset} gives {DATASET_GEOMETRY[self.dataset][0]} '
                                        f'clients, but got {self.partition.n_clients=}.')
        if self.repeats < 1 or self.window_stride < 1:
            raise ExperimentConfigError(f'repeats and window_stride must be positive, '
                                        f'but got {self.repeats=}, {self.window_stride=}.')
        if self.max_train_rows is not None and self.max_train_rows < self.model.window_len:
            raise ExperimentConfigError(f'max_train_rows must hold a window, but got {self.max_train_rows=}.')

    def resolved(self) -> ExperimentConfig:
        """ The smoke profile applied and the run seed pushed into the nested configs.
        """
        cfg = self
        if cfg.smoke:
            max_rows = min(cfg.max_train_rows or SMOKE_MAX_TRAIN_ROWS, SMOKE_MAX_TRAIN_ROWS)
            cfg = replace(cfg,
                          smoke=False,
                          max_train_rows=max_rows,
                          model=replace(cfg.model, hidden_size=SMOKE_HIDDEN, latent_size=SMOKE_LATENT),
                          federation=replace(cfg.federation, global_epochs=SMOKE_GLOBAL_EPOCHS))
        return replace(cfg,
                       federation=replace(cfg.federation, seed=cfg.seed),
                       partition=replace(cfg.partition, seed=cfg.seed))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> ExperimentConfig:
        nested = {'model': ModelConfig, 'federation': FederationConfig, 'partition': PartitionConfig}
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            value = d[f.name]
            kwargs[f.name] = nested[f.name](**value) if f.name in nested and isinstance(value, dict) else value
        return cls(**kwargs)


def _strip(d: Any) -> Any:
    if isinstance(d, dict):
        return {k: _strip(v) for k, v in d.items() if k not in _UNFINGERPRINTED}
    return d


def fingerprint(cfg: ExperimentConfig) -> str:
    """ SHA-256 of the canonical JSON of the resolved config, without seeds and paths.
    """
    resolved = cfg.resolved()
    payload = json.dumps(_strip(replace(resolved, repeats=1).to_dict()), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()


@dataclass
class ResultsRecord:
    fingerprint: str
    seed: int
    status: str
    config: Dict[str, Any]
    result: Optional[Dict[str, Any]] = None
    client_results: List[Dict[str, Any]] = field(default_factory=list)
    round_seconds: List[float] = field(default_factory=list)
    loss_curves: Dict[str, List[float]] = field(default_factory=dict)
    total_seconds: float = 0.0
    stage: Optional[str] = None
    error: Optional[str] = None

    @property
    def key(self) -> Tuple[str, int]:
        return self.fingerprint, self.seed

    @property
    def ok(self) -> bool:
        return self.status == 'ok'

    @property
    def evaluation(self) -> Optional[EvaluationResult]:
        return None if self.result is None else EvaluationResult.from_dict(self.result)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> ResultsRecord:
        d = json.loads(line)
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


class ResultStore(object):
    """ Append-only JSON-lines store of ResultsRecords; the latest record of a (fingerprint, seed) wins ::

        store = ResultStore('results')
        store.append(record)
        store.completed(fingerprint, seed)
    """

    def __init__(self,
                 directory: Union[str, Path]
                 ) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.path = self.directory / RESULTS_FILE
        self._lock = threading.Lock()

    def append(self,
               record: ResultsRecord
               ) -> None:
        line = record.to_json() + '\n'
        with self._lock:
            self._terminate_partial_line()
            with open(self.path, 'a') as f:
                f.write(line)
                f.flush()

    def _terminate_partial_line(self) -> None:
        # a run killed mid-write leaves a line without newline; start the next record on a fresh line
        if self.path.is_file() and self.path.stat().st_size > 0:
            with open(self.path, 'rb') as f:
                f.seek(-1, 2)
                last = f.read(1)
            if last != b'\n':
                with open(self.path, 'a') as f:
                    f.write('\n')

    def load(self) -> List[ResultsRecord]:
        if not self.path.is_file():
            return []
        latest: Dict[Tuple[str, int], ResultsRecord] = {}
        with self._lock:
            lines = self.path.read_text().splitlines()
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                record = ResultsRecord.from_json(line)
            except (json.JSONDecodeError, TypeError, KeyError) as e:
                logger.warning(f'{self.path}:{number}: skipping unreadable record ({e})')
                continue
            latest[record.key] = record
        return list(latest.values())

    def completed(self,
                  fingerprint: str,
                  seed: int
                  ) -> Optional[ResultsRecord]:
        for record in self.load():
            if record.key == (fingerprint, seed) and record.ok:
                return record
        return None


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


def _evaluate_params(params: ParameterSet,
                     cfg: ExperimentConfig,
                     bundle,
                     train_windows: list,
                     fp: str
                     ) -> EvaluationResult:
    with _stage('score'):
        params = calibrate(params, cfg.model, train_windows)
        scores, labels = [], []
        for series in bundle.series:
            test_windows = make_test_windows(series.test, cfg.model.window_len)
            scores.append(score_series(params, cfg.model, test_windows, len(series.test)))
            labels.append(series.test_labels)
    with _stage('evaluate'):
        return evaluate(np.concatenate(scores), np.concatenate(labels), fp)


def run_experiment(cfg: ExperimentConfig,
                   seed: Optional[int] = None
                   ) -> ResultsRecord:
    """ Run one experiment; failures become a record naming the failed stage.

    Args:
        cfg: experiment config
        seed: overrides cfg.seed

    Returns: ResultsRecord with status ok or failed

    """
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    start = time.perf_counter()
    fp = fingerprint(cfg)
    cfg = cfg.resolved()
    record = ResultsRecord(fp, cfg.seed, 'ok', cfg.to_dict())
    try:
        with _stage('load'):
            cfg.validate()
            bundle = load_dataset(cfg.dataset, cfg.data_root, strict=cfg.strict_geometry)
            if cfg.max_train_rows is not None:
                bundle = truncate(bundle, cfg.max_train_rows)
        with _stage('normalize'):
            bundle = normalize(bundle)
        with _stage('partition'):
            assignment = partition(bundle, cfg.partition)
            data = build_client_data(bundle, assignment, cfg.model.window_len, cfg.window_stride)
            out = Path(cfg.output_dir)
            (out / 'assignments').mkdir(parents=True, exist_ok=True)
            assignment.write_table(out / 'assignments' / f'{fp[:16]}_{cfg.seed}.csv')
        with _stage('train'):
            training: TrainingResult = run_training(cfg.model, cfg.federation, data)
        record.round_seconds = list(training.round_seconds)
        record.loss_curves = {str(k): v for k, v in training.loss_curves.items()}

        if training.global_params is not None:
            result = _evaluate_params(training.global_params, cfg, bundle, [d.windows for d in data], fp)
            (out / 'checkpoints').mkdir(parents=True, exist_ok=True)
            training.global_params.save(out / 'checkpoints' / f'{fp[:16]}_{cfg.seed}.params')
        else:
            # isolated clients: each model scored on the full test split, metrics averaged over clients
            client_results = [_evaluate_params(params, cfg, bundle, [d.windows], fp)
                              for params, d in zip(training.client_params, data)]
            record.client_results = [r.to_dict() for r in client_results]
            with _stage('evaluate'):
                result = average_results(client_results, fp)
        record.result = result.to_dict()
    except StageError as e:
        logger.error(f'{cfg.dataset}/{cfg.model.kind}/{cfg.federation.strategy} seed={cfg.seed}: {e}')
        logger.debug(''.join(traceback.format_exception(type(e.cause), e.cause, e.cause.__traceback__)))
        record.status, record.stage, record.error = 'failed', e.stage, f'{type(e.cause).__name__}: {e.cause}'
    record.total_seconds = time.perf_counter() - start
    return record


@dataclass(frozen=True)
class GridSpec:
    """ Cross product of datasets, models, strategies, partitions and seeds over a base config.

    A partition is a dict with keys scheme, beta and n_clients; without partitions every dataset uses its
    default one.
    """
    datasets: Tuple[str, ...] = ('PSM',)
    models: Tuple[str, ...] = ('USAD',)
    strategies: Tuple[str, ...] = ('FedAvg',)
    partitions: Optional[Tuple[Dict[str, Any], ...]] = None
    seeds: Tuple[int, ...] = (0,)
    base: ExperimentConfig = field(default_factory=ExperimentConfig)
    max_workers: int = 1

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> GridSpec:
        base = d.get('base', {})
        return cls(datasets=tuple(canonical(x, DATASET_ALIASES) for x in d.get('datasets', cls.datasets)),
                   models=tuple(canonical(x, MODEL_ALIASES) for x in d.get('models', cls.models)),
                   strategies=tuple(canonical(x, STRATEGY_ALIASES) for x in d.get('strategies', cls.strategies)),
                   partitions=tuple(d['partitions']) if d.get('partitions') else None,
                   seeds=tuple(d.get('seeds', cls.seeds)),
                   base=config_from_sections(base) if isinstance(base, dict) else base,
                   max_workers=int(d.get('max_workers', 1)))

    def expand(self) -> List[Tuple[ExperimentConfig, int]]:
        configs = []
        for dataset, kind, strategy in product(self.datasets, self.models, self.strategies):
            # Centralized pools every client, so one partition suffices
            partitions = [default_partition(dataset)] if self.partitions is None or strategy == 'Centralized' else \
                [PartitionConfig(SCHEME_ALIASES[p.get('scheme', 'dirichlet')],
                                 beta=float(p.get('beta', 0.5)),
                                 n_clients=int(p.get('n_clients', DATASET_GEOMETRY[dataset][2])))
                 for p in self.partitions]
            for partition_cfg in partitions:
                if partition_cfg.scheme == 'per_series':
                    partition_cfg = replace(partition_cfg, n_clients=DATASET_GEOMETRY[dataset][0])
                cfg = replace(self.base,
                              dataset=dataset,
                              model=replace(self.base.model, kind=kind, input_dims=DATASET_GEOMETRY[dataset][1]),
                              federation=replace(self.base.federation, strategy=strategy),
                              partition=partition_cfg)
                for seed in self.seeds:
                    configs.append((cfg, seed))
        return configs


def run_grid(spec: Union[GridSpec, Sequence[Tuple[ExperimentConfig, int]]],
             store: Optional[ResultStore] = None,
             max_workers: Optional[int] = None,
             disable_progress: bool = False
             ) -> List[ResultsRecord]:
    """ Run every (config, seed) of spec, skipping those with a completed record in store.

    Returns: one record per (config, seed), in grid order

    """
    if isinstance(spec, GridSpec):
        max_workers = max_workers or spec.max_workers
        jobs = spec.expand()
    else:
        jobs = list(spec)
    max_workers = max_workers or 1
    for cfg, _ in jobs:
        cfg.resolved().validate()

    done = {} if store is None else {r.key: r for r in store.load() if r.ok}

    def job(item: Tuple[ExperimentConfig, int]) -> ResultsRecord:
        cfg, seed = item
        key = (fingerprint(cfg), seed)
        if key in done:
            logger.info(f'Skipping completed run {key[0][:16]} seed={seed}')
            return done[key]
        record = run_experiment(cfg, seed)
        if store is not None:
            store.append(record)
        return record

    progress = tqdm(total=len(jobs), ncols=80, disable=disable_progress)
    records = []
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for record in pool.map(job, jobs):
                records.append(record)
                progress.update()
    else:
        for item in jobs:
            records.append(job(item))
            progress.update()
    progress.close()
    failed = sum(not r.ok for r in records)
    if failed:
        logger.warning(f'{failed} of {len(records)} runs failed')
    return records


def load_config_file(path: Union[str, Path]
                     ) -> Dict[str, Any]:
    with open(path) as f:
        config = yaml.safe_load(f) or {}
    if not isinstance(config, dict):
        raise ExperimentConfigError(f'{path} must hold a mapping, but got {type(config).__name__}.')
    return config


def config_from_sections(sections: Dict[str, Any]) -> ExperimentConfig:
    """ ExperimentConfig from the sections dataset, model, federation, partition and runner of a config file.
    """
    dataset = sections.get('dataset', {}) or {}
    if isinstance(dataset, str):
        dataset = {'name': dataset}
    name = canonical(dataset.get('name', 'PSM'), DATASET_ALIASES)
    model = dict(sections.get('model', {}) or {})
    if 'kind' in model:
        model['kind'] = canonical(model['kind'], MODEL_ALIASES)
    model.setdefault('input_dims', DATASET_GEOMETRY[name][1])
    model.setdefault('window_len', DEFAULT_WINDOW_LEN)
    federation = dict(sections.get('federation', {}) or {})
    if 'strategy' in federation:
        federation['strategy'] = canonical(federation['strategy'], STRATEGY_ALIASES)
    partition_section = dict(sections.get('partition', {}) or {})
    partition_cfg = default_partition(name)
    if partition_section:
        scheme = SCHEME_ALIASES[partition_section.get('scheme', partition_cfg.scheme)]
        n_clients = partition_section.get('n_clients', DATASET_GEOMETRY[name][0] if scheme == 'per_series'
                                          else partition_cfg.n_clients)
        partition_cfg = PartitionConfig(scheme, float(partition_section.get('beta', partition_cfg.beta)),
                                        int(n_clients))
    runner = dict(sections.get('runner', {}) or {})
    try:
        return ExperimentConfig(dataset=name,
                                data_root=str(dataset.get('root', 'data')),
                                model=ModelConfig(**model),
                                federation=FederationConfig(**federation),
                                partition=partition_cfg,
                                **runner)
    except TypeError as e:
        raise ExperimentConfigError(f'Unknown config key: {e}') from e

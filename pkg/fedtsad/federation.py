"""
The training-aggregating loop: clients train locally from the global model, the server averages their models
weighted by sample counts. Strategies FedAvg, FedProx, SCAFFOLD and MOON, plus the Centralized and Isolated
baselines.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn
from tqdm import tqdm

from .models import (Correction, DivergenceError, ModelConfig, Penalty, init_model, local_train_epoch,
                     materialize, num_batches, trainable_names)
from .params import ParameterSet, ShapeMismatchError
from .partition import ClientData, merge_client_data
from .utils import derive_seed, stopwatch

logger = logging.getLogger(__name__)
round_logger = logging.getLogger(__name__ + '.rounds')

FEDERATED_STRATEGIES = ('FedAvg', 'FedProx', 'SCAFFOLD', 'MOON')
STRATEGIES = FEDERATED_STRATEGIES + ('Centralized', 'Isolated')


class AggregationError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


class DegenerateRepresentationError(ValueError):
    pass


class ClientTrainingError(RuntimeError):
    def __init__(self,
                 client_id: int,
                 cause: Exception
                 ) -> None:
        super().__init__(f'client {client_id} failed: {cause}')
        self.client_id = client_id
        self.cause = cause


@dataclass(frozen=True)
class FederationConfig:
    strategy: str = 'FedAvg'
    global_epochs: int = 1
    local_epochs: int = 10
    # FedProx proximal weight
    mu: float = 0.01
    # MOON temperature and weight of the contrastive loss
    tau: float = 0.5
    contrastive_weight: float = 1.0
    seed: int = 0
    max_workers: int = 1
    disable_progress: bool = True

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f'strategy is expected to be one of {STRATEGIES}, but got {self.strategy=}.')
        if self.global_epochs < 0 or self.local_epochs < 1:
            raise ValueError(f'Expected global_epochs >= 0 and local_epochs >= 1, '
                             f'but got {self.global_epochs=}, {self.local_epochs=}.')
        if self.mu < 0 or self.contrastive_weight < 0 or not self.tau > 0:
            raise ValueError(f'Expected mu >= 0, contrastive_weight >= 0 and tau > 0, '
                             f'but got {self.mu=}, {self.contrastive_weight=}, {self.tau=}.')
        if self.max_workers < 1:
            raise ValueError(f'max_workers must be positive, but got {self.max_workers=}.')


@dataclass
class ClientState:
    client_id: int
    params: ParameterSet
    n_rows: int
    # SCAFFOLD, the variate and its change in the last round
    control_variate: Optional[ParameterSet] = None
    control_delta: Optional[ParameterSet] = None
    # MOON, the client's model at the end of the previous round
    prev_params: Optional[ParameterSet] = None
    opt_state: Optional[dict] = None
    losses: List[float] = field(default_factory=list)
    steps: int = 0


@dataclass
class ServerState:
    global_params: ParameterSet
    server_control_variate: Optional[ParameterSet] = None
    round: int = 0
    wall_clock_per_round: List[float] = field(default_factory=list)


@dataclass
class TrainingResult:
    # None for Isolated, which keeps one model per client
    global_params: Optional[ParameterSet]
    client_params: List[ParameterSet]
    round_seconds: List[float]
    loss_curves: Dict[int, List[float]]
    server: ServerState


def aggregate_weighted(params_list: Sequence[ParameterSet],
                       weights: Sequence[float]
                       ) -> ParameterSet:
    """ Entrywise sum_i w_i theta_i / sum_i w_i.
    """
    if len(params_list) == 0 or len(params_list) != len(weights):
        raise AggregationError(f'Expected one weight per ParameterSet, but got {len(params_list)=}, {len(weights)=}.')
    weights = np.asarray(weights, dtype=np.float64)
    if (weights < 0).any() or not weights.sum() > 0:
        raise AggregationError(f'Weights must be non-negative and not all zero, but got {weights=}.')
    weights = weights / weights.sum()
    try:
        result = params_list[0].scale(float(weights[0]))
        for params, w in zip(params_list[1:], weights[1:]):
            result = result.add(params.scale(float(w)))
    except ShapeMismatchError as e:
        raise AggregationError(f'Cannot aggregate incongruent parameters: {e}') from e
    return result


def fedprox_penalty(local: ParameterSet,
                    global_ref: ParameterSet,
                    mu: float
                    ) -> Tuple[float, ParameterSet]:
    """ (mu / 2) |local - global_ref|^2 and its gradient mu (local - global_ref).
    """
    diff = local.sub(global_ref)
    return mu / 2 * diff.sq_norm(), diff.scale(mu)


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    return (a * b).sum(dim=-1) / (a.norm(dim=-1) * b.norm(dim=-1))


def moon_contrastive_loss(z: Tensor,
                          z_global: Tensor,
                          z_prev: Tensor,
                          tau: float
                          ) -> Tensor:
    """ -log(exp(cos(z, z_global) / tau) / (exp(cos(z, z_global) / tau) + exp(cos(z, z_prev) / tau))),
    averaged over rows when given [batch, d] matrices.
    """
    for name, t in (('z', z), ('z_global', z_global), ('z_prev', z_prev)):
        if (t.norm(dim=-1) == 0).any():
            raise DegenerateRepresentationError(f'{name} has a zero-norm representation.')
    positive = _cosine(z, z_global) / tau
    negative = _cosine(z, z_prev) / tau
    loss = torch.logsumexp(torch.stack([positive, negative], dim=-1), dim=-1) - positive
    return loss.mean()


def scaffold_local_step_correction(grad: ParameterSet,
                                   c_server: ParameterSet,
                                   c_client: ParameterSet
                                   ) -> ParameterSet:
    return grad.sub(c_client).add(c_server)


def scaffold_update_variates(client: ClientState,
                             global_before: ParameterSet,
                             local_after: ParameterSet,
                             lr: float,
                             K: int,
                             c_server: ParameterSet
                             ) -> Tuple[ParameterSet, ParameterSet]:
    """ c_client+ = c_client - c_server + (global_before - local_after) / (K lr).

    Returns: new client variate and its change delta_c

    """
    if K < 1:
        raise ProtocolError(f'SCAFFOLD needs at least one local step, but got {K=}.')
    if not lr > 0:
        raise ProtocolError(f'SCAFFOLD needs a positive learning rate, but got {lr=}.')
    c_new = client.control_variate.sub(c_server).add(global_before.sub(local_after).scale(1 / (K * lr)))
    return c_new, c_new.sub(client.control_variate)


def _trainable_grads(model: nn.Module,
                     value: Tensor
                     ) -> ParameterSet:
    named = list(model.named_parameters())
    grads = torch.autograd.grad(value, [p for _, p in named], allow_unused=True)
    return ParameterSet([(name, torch.zeros_like(p) if g is None else g) for (name, p), g in zip(named, grads)])


def _fedprox(global_ref: ParameterSet,
             mu: float
             ) -> Penalty:
    def penalty(model: nn.Module, batch: Tensor) -> Tuple[float, ParameterSet]:
        local = ParameterSet.from_module(model, trainable_only=True, copy=False)
        return fedprox_penalty(local, global_ref, mu)

    return penalty


def _moon(global_params: ParameterSet,
          prev_params: ParameterSet,
          model_cfg: ModelConfig,
          cfg: FederationConfig
          ) -> Penalty:
    # frozen copies owned by this client; hooks are registered on them per batch
    global_model = materialize(global_params, model_cfg).eval()
    prev_model = materialize(prev_params, model_cfg).eval()

    def penalty(model: nn.Module, batch: Tensor) -> Tuple[float, ParameterSet]:
        z = model.representation(batch)
        with torch.no_grad():
            z_global = global_model.representation(batch)
            z_prev = prev_model.representation(batch)
        value = cfg.contrastive_weight * moon_contrastive_loss(z, z_global, z_prev, cfg.tau)
        return float(value.detach()), _trainable_grads(model, value)

    return penalty


def _client_seed(cfg: FederationConfig,
                 client_id: int
                 ) -> int:
    return derive_seed(cfg.seed, 'client', client_id)


def _client_update(client: ClientState,
                   data: ClientData,
                   global_params: ParameterSet,
                   model_cfg: ModelConfig,
                   cfg: FederationConfig,
                   round_index: int,
                   strategy: str,
                   c_server: Optional[ParameterSet] = None
                   ) -> Tuple[ClientState, float]:
    # receive the global model, train local_epochs epochs, return the new client state and its seconds
    start = time.perf_counter()
    names = trainable_names(model_cfg)
    penalty: Optional[Penalty] = None
    correction: Optional[Correction] = None
    if strategy == 'FedProx':
        penalty = _fedprox(global_params.subset(names), cfg.mu)
    elif strategy == 'MOON' and client.prev_params is not None:
        penalty = _moon(global_params, client.prev_params, model_cfg, cfg)
    elif strategy == 'SCAFFOLD':
        c_client = client.control_variate

        def correction(grad: ParameterSet) -> ParameterSet:
            return scaffold_local_step_correction(grad, c_server, c_client)

    params, opt_state, losses = global_params.clone(), client.opt_state, []
    seed = _client_seed(cfg, client.client_id)
    for local_epoch in range(cfg.local_epochs):
        epoch_index = round_index * cfg.local_epochs + local_epoch
        params, opt_state, loss = local_train_epoch(params, model_cfg, data.windows, opt_state, epoch_index,
                                                    penalty=penalty, correction=correction, seed=seed)
        losses.append(loss)
    steps = cfg.local_epochs * num_batches(data.windows, model_cfg.batch_size)

    updated = replace(client, params=params, opt_state=opt_state, losses=client.losses + losses, steps=steps)
    if strategy == 'MOON':
        updated.prev_params = params
    if strategy == 'SCAFFOLD':
        c_new, delta = scaffold_update_variates(client, global_params.subset(names), params.subset(names),
                                                model_cfg.lr, steps, c_server)
        updated.control_variate, updated.control_delta = c_new, delta
    return updated, time.perf_counter() - start


def _train_clients(clients: List[ClientState],
                   data: Sequence[ClientData],
                   global_params: Sequence[ParameterSet],
                   model_cfg: ModelConfig,
                   cfg: FederationConfig,
                   round_index: int,
                   strategy: str,
                   c_server: Optional[ParameterSet] = None
                   ) -> List[ClientState]:
    # clients share nothing mutable; results are collected in client order
    def task(i: int) -> Tuple[ClientState, float]:
        try:
            return _client_update(clients[i], data[i], global_params[i], model_cfg, cfg, round_index, strategy,
                                  c_server)
        except (DivergenceError, DegenerateRepresentationError, ProtocolError) as e:
            raise ClientTrainingError(clients[i].client_id, e) from e

    if cfg.max_workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
            outcomes = list(pool.map(task, range(len(clients))))
    else:
        outcomes = [task(i) for i in range(len(clients))]

    for client, seconds in outcomes:
        round_logger.info(f'round={round_index} client={client.client_id} loss={client.losses[-1]:.6g} '
                          f'seconds={seconds:.4f}')
    return [client for client, _ in outcomes]


def init_clients(data: Sequence[ClientData],
                 global_params: ParameterSet,
                 model_cfg: ModelConfig,
                 strategy: str
                 ) -> List[ClientState]:
    names = trainable_names(model_cfg)
    clients = []
    for client_id, d in enumerate(data):
        control_variate = global_params.subset(names).zeros_like() if strategy == 'SCAFFOLD' else None
        clients.append(ClientState(client_id, global_params.clone(), d.n_rows, control_variate=control_variate))
    return clients


def init_server(global_params: ParameterSet,
                model_cfg: ModelConfig,
                strategy: str
                ) -> ServerState:
    c_server = global_params.subset(trainable_names(model_cfg)).zeros_like() if strategy == 'SCAFFOLD' else None
    return ServerState(global_params, server_control_variate=c_server)


def run_round(server: ServerState,
              clients: List[ClientState],
              data: Sequence[ClientData],
              model_cfg: ModelConfig,
              cfg: FederationConfig
              ) -> Tuple[ServerState, List[ClientState]]:
    """ One global epoch with full participation: local training on every client, then weighted averaging.
    """
    if len(clients) != len(data):
        raise ProtocolError(f'Expected data for every client, but got {len(clients)=}, {len(data)=}.')
    seconds: List[float] = []
    with stopwatch(seconds):
        clients = _train_clients(clients, data, [server.global_params] * len(clients), model_cfg, cfg,
                                 server.round, cfg.strategy, server.server_control_variate)
        global_params = aggregate_weighted([c.params for c in clients], [c.n_rows for c in clients])
        c_server = server.server_control_variate
        if cfg.strategy == 'SCAFFOLD':
            # uniform mean over clients, whatever their sample counts
            deltas = [c.control_delta for c in clients]
            c_server = c_server.add(aggregate_weighted(deltas, [1.0] * len(deltas)))
    round_logger.info(f'round={server.round} client=server loss={np.mean([c.losses[-1] for c in clients]):.6g} '
                      f'seconds={seconds[0]:.4f}')
    server = ServerState(global_params, c_server, server.round + 1, server.wall_clock_per_round + seconds)
    return server, clients


def _run_centralized(global_params: ParameterSet,
                     data: ClientData,
                     model_cfg: ModelConfig,
                     cfg: FederationConfig
                     ) -> Tuple[ServerState, List[ClientState]]:
    # a single client owning all data; each global epoch is local_epochs passes, without averaging
    server = ServerState(global_params)
    clients = init_clients([data], global_params, model_cfg, 'FedAvg')
    for _ in tqdm(range(cfg.global_epochs), ncols=80, disable=cfg.disable_progress):
        seconds: List[float] = []
        with stopwatch(seconds):
            clients = _train_clients(clients, [data], [server.global_params], model_cfg, cfg, server.round, 'FedAvg')
        server = ServerState(clients[0].params, None, server.round + 1, server.wall_clock_per_round + seconds)
    return server, clients


def _run_isolated(init_params: List[ParameterSet],
                  data: Sequence[ClientData],
                  model_cfg: ModelConfig,
                  cfg: FederationConfig
                  ) -> Tuple[ServerState, List[ClientState]]:
    # no communication; every client keeps training its own model, one timing entry per global epoch
    clients = [ClientState(client_id, params.clone(), d.n_rows)
               for client_id, (params, d) in enumerate(zip(init_params, data))]
    server = ServerState(init_params[0])
    for _ in tqdm(range(cfg.global_epochs), ncols=80, disable=cfg.disable_progress):
        seconds: List[float] = []
        with stopwatch(seconds):
            clients = _train_clients(clients, data, [c.params for c in clients], model_cfg, cfg, server.round,
                                     'FedAvg')
        server = replace(server, round=server.round + 1, wall_clock_per_round=server.wall_clock_per_round + seconds)
    return server, clients


def run_training(model_cfg: ModelConfig,
                 cfg: FederationConfig,
                 data: Sequence[ClientData]
                 ) -> TrainingResult:
    """ Train under cfg.strategy.

    Args:
        model_cfg: detector config
        cfg: federation config
        data: training windows per client; Centralized pools them into one client

    Returns: TrainingResult; for Isolated, client_params holds one model per client and global_params is None

    """
    model_cfg.validate()
    cfg.validate()
    if not data:
        raise ProtocolError('No clients to train.')
    logger.info(f'{cfg.strategy} training of {model_cfg.kind}: {len(data)} clients, '
                f'{cfg.global_epochs} global x {cfg.local_epochs} local epochs')

    if cfg.strategy == 'Isolated':
        # DeepSVDD centers come from each client's own data
        init_params = [init_model(model_cfg, cfg.seed, d.windows) for d in data]
        server, clients = _run_isolated(init_params, data, model_cfg, cfg)
        return TrainingResult(None, [c.params for c in clients], server.wall_clock_per_round,
                              {c.client_id: c.losses for c in clients}, server)

    global_params = init_model(model_cfg, cfg.seed, [d.windows for d in data])
    if cfg.strategy == 'Centralized':
        pooled = data[0] if len(data) == 1 else merge_client_data(data)
        server, clients = _run_centralized(global_params, pooled, model_cfg, cfg)
    else:
        server = init_server(global_params, model_cfg, cfg.strategy)
        clients = init_clients(data, global_params, model_cfg, cfg.strategy)
        for _ in tqdm(range(cfg.global_epochs), ncols=80, disable=cfg.disable_progress):
            server, clients = run_round(server, clients, data, model_cfg, cfg)
    return TrainingResult(server.global_params, [c.params for c in clients], server.wall_clock_per_round,
                          {c.client_id: c.losses for c in clients}, server)

import math

import numpy as np
import pytest
import torch
from torch import nn

from fedtsad.dataset import WindowSet, make_windows
from fedtsad.federation import (AggregationError, ClientState, ClientTrainingError, DegenerateRepresentationError,
                                FederationConfig, ProtocolError, aggregate_weighted, fedprox_penalty, init_clients,
                                init_server, moon_contrastive_loss, run_round, run_training,
                                scaffold_local_step_correction, scaffold_update_variates)
from fedtsad.models import Detector, ModelConfig, init_model, register_detector
from fedtsad.params import ParameterSet
from fedtsad.partition import ClientData

from conftest import TINY


@register_detector('Quadratic')
class Quadratic(Detector):
    # loss 0.5 |theta - mean(batch)|^2, so a gradient step has a closed form
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        self.theta = nn.Parameter(torch.zeros(cfg.input_dims))

    def forward(self, batch):
        return self.theta.expand(batch.size(0), -1)

    def losses(self, batch, epoch):
        return [(0.5 * ((self.theta - batch.mean(dim=(0, 1))) ** 2).sum(), None)]

    def score(self, batch):
        return ((batch[:, -1] - self.theta) ** 2).sum(dim=-1)


def _scalars(**values):
    return ParameterSet({name: torch.tensor([v], dtype=torch.float64) for name, v in values.items()})


def _client_data(n_clients, rows=(23, 15, 31), seed=0):
    rng = np.random.default_rng(seed)
    data = []
    for i in range(n_clients):
        matrix = rng.normal(loc=i, size=(rows[i % len(rows)], TINY['input_dims']))
        data.append(ClientData(make_windows(matrix, TINY['window_len']), rows[i % len(rows)]))
    return data


def _cfg(kind='LSTM_AE', **kwargs):
    return ModelConfig(kind=kind, **{**TINY, **kwargs})


def test_aggregate_examples():
    a, b = _scalars(w=1.0, b=2.0), _scalars(w=3.0, b=4.0)
    assert aggregate_weighted([a, b], [1, 3]).flatten().tolist() == [2.5, 3.5]
    assert aggregate_weighted([a, b], [1, 0]).equal(a)
    assert aggregate_weighted([a], [7]).equal(a)
    assert float(aggregate_weighted([_scalars(w=2.0), _scalars(w=4.0)], [1, 1])['w']) == 3.0
    assert float(aggregate_weighted([_scalars(w=0.0), _scalars(w=4.0)], [1, 3])['w']) == 3.0


def test_aggregate_properties():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 6))
        params = [ParameterSet({'w': torch.tensor(rng.normal(size=4))}) for _ in range(n)]
        weights = rng.uniform(0.1, 5, size=n)
        result = aggregate_weighted(params, weights)['w']
        stacked = torch.stack([p['w'] for p in params])
        assert (result <= stacked.max(dim=0).values + 1e-12).all()
        assert (result >= stacked.min(dim=0).values - 1e-12).all()
        # scale invariant in the weights
        assert torch.allclose(result, aggregate_weighted(params, weights * 10)['w'], atol=1e-12)
        # identical inputs aggregate to themselves
        assert torch.allclose(aggregate_weighted([params[0]] * n, weights)['w'], params[0]['w'], atol=1e-12)


def test_aggregate_errors():
    a = _scalars(w=1.0)
    with pytest.raises(AggregationError):
        aggregate_weighted([], [])
    with pytest.raises(AggregationError):
        aggregate_weighted([a, a], [0, 0])
    with pytest.raises(AggregationError):
        aggregate_weighted([a, a], [1])
    with pytest.raises(AggregationError):
        aggregate_weighted([a, _scalars(v=1.0)], [1, 1])


def test_fedprox_penalty_example():
    value, grad = fedprox_penalty(_scalars(a=1.0, b=2.0), _scalars(a=0.0, b=0.0), mu=0.1)
    assert value == pytest.approx(0.25)
    assert grad.flatten().tolist() == pytest.approx([0.1, 0.2])
    value, grad = fedprox_penalty(_scalars(a=1.0), _scalars(a=1.0), mu=0.1)
    assert value == 0 and grad.sq_norm() == 0


def test_moon_loss_example():
    z = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    z_prev = torch.tensor([[0.0, 3.0]], dtype=torch.float64)
    loss = moon_contrastive_loss(z, 2 * z, z_prev, tau=0.5)
    assert float(loss) == pytest.approx(math.log(1 + math.exp(-2)))
    # equal similarities give log 2
    assert float(moon_contrastive_loss(z, z, z, tau=0.1)) == pytest.approx(math.log(2))


def test_moon_loss_zero_norm():
    z = torch.ones(2, 3)
    with pytest.raises(DegenerateRepresentationError):
        moon_contrastive_loss(z, torch.zeros(2, 3), z, 0.5)


def test_scaffold_worked_example():
    client = ClientState(0, _scalars(w=0.5), 10, control_variate=_scalars(w=0.1))
    c_server = _scalars(w=0.3)
    c_new, delta = scaffold_update_variates(client, _scalars(w=1.0), _scalars(w=0.5), lr=0.1, K=5,
                                            c_server=c_server)
    assert float(c_new['w']) == pytest.approx(0.8)
    assert float(delta['w']) == pytest.approx(0.7)
    fresh = ClientState(1, _scalars(w=0.8), 10, control_variate=_scalars(w=0.0))
    c_new, _ = scaffold_update_variates(fresh, _scalars(w=1.0), _scalars(w=0.8), lr=0.1, K=2,
                                        c_server=_scalars(w=0.0))
    assert float(c_new['w']) == pytest.approx(1.0, abs=1e-12)
    corrected = scaffold_local_step_correction(_scalars(w=2.0), c_server, client.control_variate)
    assert float(corrected['w']) == pytest.approx(2.2)
    # the server adds the uniform mean of the client changes
    deltas = [_scalars(w=0.3), _scalars(w=0.6), _scalars(w=-0.3)]
    assert float(_scalars(w=0.1).add(aggregate_weighted(deltas, [1, 1, 1]))['w']) == pytest.approx(0.3)


def test_scaffold_protocol_errors():
    client = ClientState(0, _scalars(w=0.5), 10, control_variate=_scalars(w=0.0))
    with pytest.raises(ProtocolError):
        scaffold_update_variates(client, _scalars(w=1.0), _scalars(w=0.5), lr=0.1, K=0, c_server=_scalars(w=0.0))
    with pytest.raises(ProtocolError):
        scaffold_update_variates(client, _scalars(w=1.0), _scalars(w=0.5), lr=0.0, K=3, c_server=_scalars(w=0.0))


def _simulate(strategy, means, weights, lr, local_epochs, rounds, mu=0.0):
    theta = np.zeros_like(means[0])
    c_server = np.zeros_like(theta)
    c_clients = [np.zeros_like(theta) for _ in means]
    for _ in range(rounds):
        local, deltas = [], []
        for i, m in enumerate(means):
            x = theta.copy()
            for _ in range(local_epochs):
                g = x - m
                if strategy == 'FedProx':
                    g = g + mu * (x - theta)
                if strategy == 'SCAFFOLD':
                    g = g - c_clients[i] + c_server
                x = x - lr * g
            local.append(x)
            if strategy == 'SCAFFOLD':
                c_new = c_clients[i] - c_server + (theta - x) / (local_epochs * lr)
                deltas.append(c_new - c_clients[i])
                c_clients[i] = c_new
        theta = sum(w * x for w, x in zip(weights, local)) / sum(weights)
        if strategy == 'SCAFFOLD':
            c_server = c_server + np.mean(deltas, axis=0)
    return theta, c_server


@pytest.mark.parametrize('strategy', ['FedAvg', 'FedProx', 'SCAFFOLD'])
def test_quadratic_trajectory(strategy):
    model_cfg = _cfg('Quadratic', optimizer='sgd', lr=0.1, batch_size=64)
    cfg = FederationConfig(strategy=strategy, global_epochs=4, local_epochs=3, mu=0.5)
    data = _client_data(3)
    result = run_training(model_cfg, cfg, data)
    means = [d.windows.windows.mean(dim=(0, 1)).numpy() for d in data]
    theta, c_server = _simulate(strategy, means, [d.n_rows for d in data], 0.1, 3, 4, mu=0.5)
    assert np.allclose(result.global_params['theta'].numpy(), theta, atol=1e-10)
    if strategy == 'SCAFFOLD':
        assert np.allclose(result.server.server_control_variate['theta'].numpy(), c_server, atol=1e-10)


def test_scaffold_server_variate_is_client_mean():
    model_cfg = _cfg('Quadratic', optimizer='sgd', lr=0.1, batch_size=8)
    cfg = FederationConfig(strategy='SCAFFOLD', local_epochs=2)
    data = _client_data(3)
    global_params = init_model(model_cfg, 0)
    server = init_server(global_params, model_cfg, 'SCAFFOLD')
    clients = init_clients(data, global_params, model_cfg, 'SCAFFOLD')
    for r in range(5):
        server, clients = run_round(server, clients, data, model_cfg, cfg)
        assert server.round == r + 1
        mean = aggregate_weighted([c.control_variate for c in clients], [1.0] * 3)
        assert server.server_control_variate.max_abs_diff(mean) < 1e-10
        assert [c.steps for c in clients] == [2 * 3, 2 * 2, 2 * 4]
    assert len(server.wall_clock_per_round) == 5


def test_fedprox_zero_mu_is_fedavg():
    model_cfg = _cfg()
    data = _client_data(2)
    fedavg = run_training(model_cfg, FederationConfig('FedAvg', global_epochs=3, local_epochs=2), data)
    fedprox = run_training(model_cfg, FederationConfig('FedProx', global_epochs=3, local_epochs=2, mu=0.0), data)
    assert fedprox.global_params.equal(fedavg.global_params)


def test_moon_zero_weight_is_fedavg():
    model_cfg = _cfg()
    data = _client_data(2)
    fedavg = run_training(model_cfg, FederationConfig('FedAvg', global_epochs=3, local_epochs=2), data)
    moon = run_training(model_cfg, FederationConfig('MOON', global_epochs=3, local_epochs=2,
                                                    contrastive_weight=0.0), data)
    assert moon.global_params.equal(fedavg.global_params)


def test_moon_trains():
    model_cfg = _cfg('USAD')
    data = _client_data(2)
    fedavg = run_training(model_cfg, FederationConfig('FedAvg', global_epochs=2, local_epochs=1), data)
    moon = run_training(model_cfg, FederationConfig('MOON', global_epochs=2, local_epochs=1), data)
    # identical first round, the contrastive term changes the second
    assert not moon.global_params.equal(fedavg.global_params)
    assert all(np.isfinite(c).all() for c in moon.loss_curves.values())


def test_single_client_matches_centralized():
    model_cfg = _cfg()
    data = _client_data(1)
    cfg = FederationConfig('FedAvg', global_epochs=2, local_epochs=2)
    fedavg = run_training(model_cfg, cfg, data)
    centralized = run_training(model_cfg, FederationConfig('Centralized', global_epochs=2, local_epochs=2), data)
    isolated = run_training(model_cfg, FederationConfig('Isolated', global_epochs=2, local_epochs=2), data)
    assert fedavg.global_params.equal(centralized.global_params)
    assert isolated.client_params[0].equal(centralized.global_params)
    assert isolated.global_params is None


def test_centralized_pools_clients():
    model_cfg = _cfg('Quadratic', optimizer='sgd', lr=0.1, batch_size=128)
    data = _client_data(3)
    result = run_training(model_cfg, FederationConfig('Centralized', global_epochs=2, local_epochs=1), data)
    pooled = torch.cat([d.windows.windows for d in data]).mean(dim=(0, 1)).numpy()
    theta, _ = _simulate('FedAvg', [pooled], [1], 0.1, 1, 2)
    assert np.allclose(result.global_params['theta'].numpy(), theta, atol=1e-10)
    assert len(result.client_params) == 1


def test_isolated_keeps_clients_apart():
    model_cfg = _cfg('Quadratic', optimizer='sgd', lr=0.1, batch_size=64)
    data = _client_data(3)
    result = run_training(model_cfg, FederationConfig('Isolated', global_epochs=2, local_epochs=3), data)
    for d, params in zip(data, result.client_params):
        theta, _ = _simulate('FedAvg', [d.windows.windows.mean(dim=(0, 1)).numpy()], [1], 0.1, 3, 2)
        assert np.allclose(params['theta'].numpy(), theta, atol=1e-10)
    assert len(result.round_seconds) == 2
    assert sorted(result.loss_curves) == [0, 1, 2]
    assert all(len(curve) == 6 for curve in result.loss_curves.values())


def test_zero_global_epochs():
    model_cfg = _cfg()
    data = _client_data(2)
    result = run_training(model_cfg, FederationConfig('FedAvg', global_epochs=0), data)
    assert result.global_params.equal(init_model(model_cfg, 0, [d.windows for d in data]))
    assert result.round_seconds == []


@pytest.mark.parametrize('strategy', ['FedAvg', 'SCAFFOLD', 'MOON', 'Isolated'])
def test_parallel_clients_are_deterministic(strategy):
    model_cfg = _cfg('USAD')
    data = _client_data(3)
    serial = run_training(model_cfg, FederationConfig(strategy, global_epochs=2, local_epochs=1), data)
    parallel = run_training(model_cfg, FederationConfig(strategy, global_epochs=2, local_epochs=1,
                                                        max_workers=3), data)
    for a, b in zip(serial.client_params, parallel.client_params):
        assert a.equal(b)
    if strategy != 'Isolated':
        assert serial.global_params.equal(parallel.global_params)


def test_client_failure_names_client():
    model_cfg = _cfg('Quadratic')
    data = _client_data(3)
    windows = data[1].windows.windows.clone()
    windows[0, 0, 0] = float('nan')
    data[1] = ClientData(WindowSet(windows, data[1].windows.anchor_timestamps), data[1].n_rows)
    with pytest.raises(ClientTrainingError) as info:
        run_training(model_cfg, FederationConfig('FedAvg', global_epochs=1, local_epochs=1), data)
    assert info.value.client_id == 1


def test_invalid_federation_config():
    with pytest.raises(ValueError):
        run_training(_cfg(), FederationConfig('FedSGD'), _client_data(1))
    with pytest.raises(ProtocolError):
        run_training(_cfg(), FederationConfig('FedAvg'), [])

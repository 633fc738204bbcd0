import numpy as np
import pytest
import torch

from fedtsad.dataset import make_test_windows, make_windows
from fedtsad.models import (LSTMAutoEncoder, ModelConfig, ModelConfigError, NonFiniteScoreError, batch_gradients,
                            calibrate, detector_kinds, extract_representation, init_model, local_train_epoch,
                            materialize, score_series, score_windows, trainable_names)
from fedtsad.params import ParameterSet

from conftest import TINY

KINDS = ('DeepSVDD', 'LSTM_AE', 'USAD', 'GDN', 'TranAD')


def _cfg(kind, **kwargs):
    return ModelConfig(kind=kind, **{**TINY, **kwargs})


def _windows(rows=23, seed=0):
    matrix = np.random.default_rng(seed).uniform(size=(rows, TINY['input_dims']))
    return make_windows(matrix, TINY['window_len'])


def test_registry():
    assert set(KINDS) <= set(detector_kinds())


@pytest.mark.parametrize('kwargs', [dict(kind='OCSVM'),
                                    dict(latent_size=12),
                                    dict(alpha=0.5, beta_score=0.6),
                                    dict(optimizer='rmsprop'),
                                    dict(dtype='float16'),
                                    dict(kind='GDN', window_len=1, latent_size=1),
                                    dict(batch_size=0)])
def test_invalid_config(kwargs):
    with pytest.raises(ModelConfigError):
        ModelConfig(**{**TINY, 'kind': 'USAD', **kwargs}).validate()


@pytest.mark.parametrize('kind', KINDS)
def test_init_deterministic(kind):
    cfg = _cfg(kind)
    windows = _windows()
    a, b = init_model(cfg, 3, windows), init_model(cfg, 3, windows)
    assert a.equal(b)
    assert not a.subset(trainable_names(cfg)).equal(init_model(cfg, 4, windows).subset(trainable_names(cfg)))
    assert all(t.dtype == torch.float64 for _, t in a.items())


@pytest.mark.parametrize('kind', KINDS)
def test_train_epoch_deterministic(kind):
    cfg = _cfg(kind)
    windows = _windows()
    params = init_model(cfg, 0, windows)
    a, state_a, loss_a = local_train_epoch(params, cfg, windows, round_index=2, seed=5)
    b, state_b, loss_b = local_train_epoch(params, cfg, windows, round_index=2, seed=5)
    assert a.equal(b) and loss_a == loss_b
    assert not a.equal(params)
    c, _, _ = local_train_epoch(a, cfg, windows, opt_state=state_a, round_index=3, seed=5)
    d, _, _ = local_train_epoch(b, cfg, windows, opt_state=state_b, round_index=3, seed=5)
    assert c.equal(d)


def test_shuffle_depends_on_round():
    cfg = _cfg('LSTM_AE', batch_size=4)
    windows = _windows()
    params = init_model(cfg, 0)
    a, _, _ = local_train_epoch(params, cfg, windows, round_index=0)
    b, _, _ = local_train_epoch(params, cfg, windows, round_index=1)
    assert not a.equal(b)


@pytest.mark.parametrize('optimizer', ['adam', 'sgd'])
def test_zero_learning_rate(optimizer):
    cfg = _cfg('USAD', lr=0.0, optimizer=optimizer)
    windows = _windows()
    params = init_model(cfg, 0)
    trained, _, _ = local_train_epoch(params, cfg, windows)
    assert trained.equal(params)


def test_zero_penalty_is_no_penalty():
    cfg = _cfg('LSTM_AE', batch_size=4)
    windows = _windows()
    params = init_model(cfg, 0)
    names = trainable_names(cfg)

    def zero_penalty(model, batch):
        return torch.zeros((), dtype=torch.float64), params.subset(names).zeros_like()

    a, _, loss_a = local_train_epoch(params, cfg, windows)
    b, _, loss_b = local_train_epoch(params, cfg, windows, penalty=zero_penalty)
    assert a.equal(b) and loss_a == loss_b


@pytest.mark.parametrize('kind', KINDS)
def test_sgd_step(kind):
    # one batch holding every window: one step of -lr * gradient
    cfg = _cfg(kind, optimizer='sgd', lr=0.05, batch_size=64)
    windows = _windows()
    params = init_model(cfg, 0, windows)
    model = materialize(params, cfg)
    model.train()
    loss, grads = batch_gradients(model, windows.windows, epoch=1)
    trained, _, mean_loss = local_train_epoch(params, cfg, windows)
    expected = params.subset(trainable_names(cfg)).sub(grads.scale(cfg.lr))
    assert trained.subset(trainable_names(cfg)).max_abs_diff(expected) < 1e-10
    assert mean_loss == pytest.approx(loss, rel=1e-10)


def _numeric_derivative(model, loss_fn, name, index, eps=1e-6):
    p = dict(model.named_parameters())[name]
    flat = p.data.view(-1)
    original = float(flat[index])
    with torch.no_grad():
        flat[index] = original + eps
        up = float(loss_fn())
        flat[index] = original - eps
        down = float(loss_fn())
        flat[index] = original
    return (up - down) / (2 * eps)


def _check_gradient(model, grads, loss_fn, names, n_points=20, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_points):
        name = names[rng.integers(len(names))]
        index = int(rng.integers(grads[name].numel()))
        analytic = float(grads[name].reshape(-1)[index])
        numeric = _numeric_derivative(model, loss_fn, name, index)
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8, (name, index)


@pytest.mark.parametrize('kind', ['DeepSVDD', 'LSTM_AE', 'GDN', 'TranAD'])
def test_gradient(kind):
    cfg = _cfg(kind)
    windows = _windows()
    model = materialize(init_model(cfg, 1, windows), cfg)
    model.train()
    batch = windows.windows[:8]
    _, grads = batch_gradients(model, batch, epoch=3)

    def loss():
        return sum(term for term, _ in model.losses(batch, 3))

    _check_gradient(model, grads, loss, trainable_names(cfg))


def test_usad_gradient_per_phase():
    cfg = _cfg('USAD')
    windows = _windows()
    model = materialize(init_model(cfg, 1), cfg)
    model.train()
    batch = windows.windows[:8]
    _, grads = batch_gradients(model, batch, epoch=3)
    names = trainable_names(cfg)

    def term(i):
        return lambda: model.losses(batch, 3)[i][0]

    _check_gradient(model, grads, term(0), [n for n in names if n.startswith('decoder1.')])
    _check_gradient(model, grads, term(1), [n for n in names if n.startswith('decoder2.')])
    _check_gradient(model, grads, lambda: term(0)() + term(1)(), [n for n in names if n.startswith('encoder.')])


def test_usad_phase_weights():
    cfg = _cfg('USAD')
    model = materialize(init_model(cfg, 0), cfg)
    batch = _windows().windows[:4]
    (first, _), (second, _) = model.losses(batch, 1)
    w = batch.flatten(1)
    ae1, ae2, _ = model(batch)
    assert float(first) == pytest.approx(float(((ae1 - w) ** 2).mean()))
    assert float(second) == pytest.approx(float(((ae2 - w) ** 2).mean()))


def test_usad_alpha_one_scores_first_autoencoder():
    cfg = _cfg('USAD', alpha=1.0, beta_score=0.0)
    params = init_model(cfg, 0)
    batch = _windows().windows
    model = materialize(params, cfg)
    with torch.no_grad():
        expected = ((model(batch)[0] - batch.flatten(1)) ** 2).mean(dim=-1)
    assert np.allclose(score_windows(params, cfg, batch), expected.numpy(), atol=1e-12)


def test_deepsvdd_center():
    cfg = _cfg('DeepSVDD')
    windows = _windows()
    params = init_model(cfg, 0, windows)
    model = materialize(params, cfg)
    with torch.no_grad():
        assert torch.allclose(params['center'], model(windows.windows).mean(dim=0), atol=1e-12)
    trained, _, _ = local_train_epoch(params, cfg, windows)
    assert torch.equal(trained['center'], params['center'])
    assert 'center' not in trainable_names(cfg)


def test_deepsvdd_scores_center_zero():
    cfg = _cfg('DeepSVDD')
    window = _windows().windows[:1]
    params = init_model(cfg, 0, window)
    assert score_windows(params, cfg, window)[0] == pytest.approx(0.0, abs=1e-12)


def test_lstm_perfect_reconstruction(monkeypatch):
    monkeypatch.setattr(LSTMAutoEncoder, 'forward', lambda self, batch: batch)
    cfg = _cfg('LSTM_AE')
    scores = score_windows(init_model(cfg, 0), cfg, _windows())
    assert np.array_equal(scores, np.zeros(20))


@pytest.mark.parametrize('kind', KINDS)
def test_score_series_alignment(kind):
    cfg = _cfg(kind)
    test = np.random.default_rng(1).uniform(size=(30, TINY['input_dims']))
    windows = make_test_windows(test, TINY['window_len'])
    params = init_model(cfg, 0, _windows())
    scores = score_series(params, cfg, windows, 30)
    assert scores.shape == (30,)
    assert np.isfinite(scores).all()
    per_window = score_windows(params, cfg, windows)
    assert np.array_equal(scores[3:], per_window)
    assert np.array_equal(scores[:3], np.full(3, per_window[0]))


def test_score_series_rejects_non_finite(monkeypatch):
    cfg = _cfg('LSTM_AE')
    params = init_model(cfg, 0)
    monkeypatch.setattr(LSTMAutoEncoder, 'score', lambda self, batch: torch.full((batch.size(0),), float('nan')))
    with pytest.raises(NonFiniteScoreError):
        score_series(params, cfg, make_test_windows(np.zeros((12, TINY['input_dims'])), TINY['window_len']))


@pytest.mark.parametrize('kind, dim', [('DeepSVDD', 2), ('LSTM_AE', 2), ('USAD', 2), ('GDN', 2), ('TranAD', 6)])
def test_representation(kind, dim):
    cfg = _cfg(kind)
    params = init_model(cfg, 0, _windows())
    z = extract_representation(params, cfg, _windows().windows[:7])
    assert z.shape == (7, dim)
    assert z.dtype == torch.float64


def test_representation_is_differentiable():
    cfg = _cfg('USAD')
    model = materialize(init_model(cfg, 0), cfg)
    z = model.representation(_windows().windows[:4])
    z.sum().backward()
    assert model.encoder[1].weight.grad is not None


def test_gdn_calibrate():
    cfg = _cfg('GDN', val_fraction=0.5)
    windows = _windows()
    params = init_model(cfg, 0)
    calibrated = calibrate(params, cfg, windows)
    model = materialize(params, cfg)
    tail = windows.windows[-10:]
    with torch.no_grad():
        errors = (model(tail) - tail[:, -1]).abs().numpy()
    assert np.allclose(calibrated['score_median'].numpy(), np.median(errors, axis=0), atol=1e-12)
    iqr = np.quantile(errors, 0.75, axis=0) - np.quantile(errors, 0.25, axis=0)
    assert np.allclose(calibrated['score_iqr'].numpy(), iqr, atol=1e-12)
    names = trainable_names(cfg)
    assert calibrated.subset(names).equal(params.subset(names))


def test_gdn_neighbors():
    cfg = _cfg('GDN', input_dims=5, latent_size=3, top_k=2)
    model = materialize(init_model(cfg, 0), cfg)
    mask = model.neighbor_mask()
    assert mask.diagonal().all()
    assert mask.sum(dim=1).tolist() == [3] * 5


def test_parameter_set_round_trip_through_model():
    cfg = _cfg('TranAD')
    params = init_model(cfg, 0)
    assert ParameterSet.from_module(materialize(params, cfg)).equal(params)
    # the positional encoding is derived, not a parameter of the model state
    assert 'pos_encoding' not in params

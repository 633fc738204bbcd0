"""
Anomaly detectors behind one interface: initialize, train one local epoch, score test windows and expose the
representation that the model-contrastive regularizer compares.

Every detector is an `nn.Module` registered with `register_detector`. Training and scoring functions take and
return `ParameterSet`s, so a detector never holds state between calls.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type, Union

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .dataset import WindowSet, expand_scores
from .params import ParameterSet
from .utils import derive_seed, seeded, torch_dtype


OPTIMIZERS = ('adam', 'sgd')
# added to the inter-quartile range of GDN forecast errors
GDN_IQR_EPS = 1e-2

# loss terms of one batch: (loss, parameter-name prefixes the term updates, None for all)
LossTerms = List[Tuple[Tensor, Optional[Tuple[str, ...]]]]
Penalty = Callable[[nn.Module, Tensor], Tuple[Tensor, ParameterSet]]
Correction = Callable[[ParameterSet], ParameterSet]

_DETECTORS: Dict[str, Type[Detector]] = {}


class ModelConfigError(ValueError):
    pass


class NonFiniteScoreError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self,
                 batch_index: int,
                 loss: float
                 ) -> None:
        super().__init__(f'Non-finite loss {loss} at batch {batch_index}.')
        self.batch_index = batch_index
        self.loss = loss


@dataclass(frozen=True)
class ModelConfig:
    kind: str = 'USAD'
    input_dims: int = 25
    window_len: int = 10
    hidden_size: int = 64
    latent_size: int = 32
    lr: float = 1e-3
    batch_size: int = 128
    optimizer: str = 'adam'
    # USAD score weights
    alpha: float = 0.1
    beta_score: float = 0.9
    # GDN neighbors per node
    top_k: int = 5
    dtype: str = 'float32'
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.kind not in _DETECTORS:
            raise ModelConfigError(f'kind is expected to be one of {tuple(_DETECTORS)}, but got {self.kind=}.')
        for name in ('input_dims', 'window_len', 'hidden_size', 'latent_size', 'batch_size', 'top_k'):
            if getattr(self, name) < 1:
                raise ModelConfigError(f'{name} must be positive, but got {getattr(self, name)}.')
        if self.latent_size >= self.window_len * self.input_dims:
            raise ModelConfigError(f'latent_size must be smaller than window_len * input_dims, but got '
                                   f'{self.latent_size=}, {self.window_len=}, {self.input_dims=}.')
        if not (0 <= self.alpha <= 1 and 0 <= self.beta_score <= 1) \
                or abs(self.alpha + self.beta_score - 1) > 1e-9:
            raise ModelConfigError(f'alpha and beta_score must be convex weights, '
                                   f'but got {self.alpha=}, {self.beta_score=}.')
        if self.lr < 0:
            raise ModelConfigError(f'lr must be non-negative, but got {self.lr=}.')
        if self.optimizer not in OPTIMIZERS:
            raise ModelConfigError(f'optimizer is expected to be one of {OPTIMIZERS}, but got {self.optimizer=}.')
        if not 0 < self.val_fraction < 1:
            raise ModelConfigError(f'val_fraction must lie in (0, 1), but got {self.val_fraction=}.')
        try:
            torch_dtype(self.dtype)
        except ValueError as e:
            raise ModelConfigError(str(e)) from e
        _DETECTORS[self.kind].check_config(self)


def register_detector(kind: str
                      ) -> Callable[[Type[Detector]], Type[Detector]]:
    """ Class decorator adding a detector kind ::

        @register_detector('Quadratic')
        class Quadratic(Detector):
            ...
    """

    def _register(cls: Type[Detector]) -> Type[Detector]:
        cls.kind = kind
        _DETECTORS[kind] = cls
        return cls

    return _register


def detector_kinds() -> Tuple[str, ...]:
    return tuple(_DETECTORS)


class RepresentationHook(object):
    """ Capture the output of a named submodule on its first call within a forward pass ::

        with RepresentationHook(model, 'encoder') as hook:
            model(batch)
        z = hook.output

    Args:
        model: Model
        name: Name of module appeared in `model.named_modules()`
        select: maps the raw module output to a [batch, d] tensor
    """

    def __init__(self,
                 model: nn.Module,
                 name: str,
                 select: Optional[Callable[[Any], Tensor]] = None
                 ) -> None:
        modules = dict(model.named_modules())
        if name not in modules:
            raise ModelConfigError(f'{name} is not a submodule of {type(model).__name__}.')
        self.module = modules[name]
        self.select = select or (lambda output: output)
        self.output: Optional[Tensor] = None
        self._handle = None

    def __enter__(self) -> RepresentationHook:
        def hook(*args):
            if self.output is None:
                self.output = self.select(args[2])

        self.output = None
        self._handle = self.module.register_forward_hook(hook)
        return self

    def __exit__(self, *exc) -> None:
        self._handle.remove()
        self._handle = None


class Detector(nn.Module):
    """ Base class of the detectors. Subclasses implement `forward`, `losses` and `score`.
    """
    kind: str = ''
    # submodule whose output is the representation, and how to reduce it to [batch, d]
    representation_layer: str = ''

    def __init__(self,
                 cfg: ModelConfig
                 ) -> None:
        super().__init__()
        self.cfg = cfg

    @classmethod
    def check_config(cls,
                     cfg: ModelConfig
                     ) -> None:
        pass

    def select_representation(self, output: Any) -> Tensor:
        return output

    def losses(self,
               batch: Tensor,
               epoch: int
               ) -> LossTerms:
        raise NotImplementedError

    def score(self,
              batch: Tensor
              ) -> Tensor:
        raise NotImplementedError

    def representation(self,
                       batch: Tensor
                       ) -> Tensor:
        with RepresentationHook(self, self.representation_layer, self.select_representation) as hook:
            self(batch)
        return hook.output

    def initialize(self,
                   windows: Sequence[Tensor]
                   ) -> None:
        """ Data-dependent initialization after the seeded one.
        """
        pass

    def calibrate(self,
                  windows: Tensor
                  ) -> None:
        pass


def _batches(windows: Tensor,
             batch_size: int,
             dtype: torch.dtype
             ) -> List[Tensor]:
    return [chunk.to(dtype) for chunk in windows.split(batch_size)]


@register_detector('DeepSVDD')
class DeepSVDD(Detector):
    # one-class network; windows are scored by their latent distance to a fixed center
    representation_layer = 'net'

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        self.net = nn.Sequential(nn.Flatten(),
                                 nn.Linear(cfg.window_len * cfg.input_dims, cfg.hidden_size),
                                 nn.ReLU(),
                                 # no bias, otherwise the network can map every input onto the center
                                 nn.Linear(cfg.hidden_size, cfg.latent_size, bias=False))
        self.register_buffer('center', torch.zeros(cfg.latent_size))

    def forward(self, batch: Tensor) -> Tensor:
        return self.net(batch)

    @torch.no_grad()
    def initialize(self,
                   windows: Sequence[Tensor]
                   ) -> None:
        total, count = torch.zeros_like(self.center), 0
        for part in windows:
            for batch in _batches(part, self.cfg.batch_size, self.center.dtype):
                total += self(batch).sum(dim=0)
                count += batch.size(0)
        if count:
            self.center.copy_(total / count)

    def losses(self, batch: Tensor, epoch: int) -> LossTerms:
        return [(((self(batch) - self.center) ** 2).sum(dim=-1).mean(), None)]

    def score(self, batch: Tensor) -> Tensor:
        return (self(batch) - self.center).norm(dim=-1)


@register_detector('LSTM_AE')
class LSTMAutoEncoder(Detector):
    representation_layer = 'encoder'

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        self.encoder = nn.LSTM(cfg.input_dims, cfg.latent_size, batch_first=True)
        self.decoder = nn.LSTM(cfg.latent_size, cfg.hidden_size, batch_first=True)
        self.output = nn.Linear(cfg.hidden_size, cfg.input_dims)

    def select_representation(self, output: Tuple[Tensor, Tuple[Tensor, Tensor]]) -> Tensor:
        # final hidden state of the single layer
        return output[1][0][-1]

    def forward(self, batch: Tensor) -> Tensor:
        _, (h, _) = self.encoder(batch)
        z = h[-1].unsqueeze(1).expand(-1, batch.size(1), -1)
        decoded, _ = self.decoder(z)
        return self.output(decoded)

    def losses(self, batch: Tensor, epoch: int) -> LossTerms:
        return [(F.mse_loss(self(batch), batch), None)]

    def score(self, batch: Tensor) -> Tensor:
        return ((self(batch)[:, -1] - batch[:, -1]) ** 2).mean(dim=-1)


def _usad_decoder(cfg: ModelConfig) -> nn.Sequential:
    return nn.Sequential(nn.Linear(cfg.latent_size, cfg.hidden_size), nn.ReLU(),
                         nn.Linear(cfg.hidden_size, cfg.hidden_size), nn.ReLU(),
                         nn.Linear(cfg.hidden_size, cfg.window_len * cfg.input_dims), nn.Sigmoid())


@register_detector('USAD')
class USAD(Detector):
    """ Two autoencoders sharing one encoder, trained adversarially. At epoch e the losses are ::

        L1 = 1/e |W - AE1(W)|^2 + (1 - 1/e) |W - AE2(AE1(W))|^2    updates encoder, decoder1
        L2 = 1/e |W - AE2(W)|^2 - (1 - 1/e) |W - AE2(AE1(W))|^2    updates encoder, decoder2

    and a window is scored by alpha |W - AE1(W)|^2 + beta_score |W - AE2(AE1(W))|^2.
    """
    representation_layer = 'encoder'

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        # linear latent; a final ReLU can map whole batches to the zero vector
        self.encoder = nn.Sequential(nn.Flatten(),
                                     nn.Linear(cfg.window_len * cfg.input_dims, cfg.hidden_size), nn.ReLU(),
                                     nn.Linear(cfg.hidden_size, cfg.hidden_size), nn.ReLU(),
                                     nn.Linear(cfg.hidden_size, cfg.latent_size))
        self.decoder1 = _usad_decoder(cfg)
        self.decoder2 = _usad_decoder(cfg)

    def forward(self, batch: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        z = self.encoder(batch)
        ae1 = self.decoder1(z)
        ae2 = self.decoder2(z)
        ae2ae1 = self.decoder2(self.encoder(ae1))
        return ae1, ae2, ae2ae1

    @staticmethod
    def phase_weights(epoch: int) -> Tuple[float, float]:
        first = 1 / epoch
        return first, 1 - first

    def losses(self, batch: Tensor, epoch: int) -> LossTerms:
        w = batch.flatten(1)
        ae1, ae2, ae2ae1 = self(batch)
        first, second = self.phase_weights(epoch)
        adversarial = F.mse_loss(ae2ae1, w)
        loss1 = first * F.mse_loss(ae1, w) + second * adversarial
        loss2 = first * F.mse_loss(ae2, w) - second * adversarial
        return [(loss1, ('encoder.', 'decoder1.')),
                (loss2, ('encoder.', 'decoder2.'))]

    def score(self, batch: Tensor) -> Tensor:
        w = batch.flatten(1)
        ae1, _, ae2ae1 = self(batch)
        return self.cfg.alpha * ((w - ae1) ** 2).mean(dim=-1) + self.cfg.beta_score * ((w - ae2ae1) ** 2).mean(dim=-1)


class GraphAttentionLayer(nn.Module):
    """ Attention over the neighbors of every node, conditioned on learned node embeddings.
    """

    def __init__(self,
                 in_len: int,
                 dim: int,
                 negative_slope: float = 0.2
                 ) -> None:
        super().__init__()
        self.lin = nn.Linear(in_len, dim, bias=False)
        self.att_i = nn.Parameter(torch.empty(2 * dim))
        self.att_j = nn.Parameter(torch.empty(2 * dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.negative_slope = negative_slope
        bound = 1 / math.sqrt(2 * dim)
        nn.init.uniform_(self.att_i, -bound, bound)
        nn.init.uniform_(self.att_j, -bound, bound)

    def forward(self,
                x: Tensor,
                embedding: Tensor,
                mask: Tensor
                ) -> Tensor:
        # x: [B, n, in_len], embedding: [n, dim], mask: [n, n] with mask[i, j] if j feeds i
        h = self.lin(x)
        g = torch.cat([h, embedding.expand(h.size(0), -1, -1)], dim=-1)
        logits = F.leaky_relu((g @ self.att_i).unsqueeze(-1) + (g @ self.att_j).unsqueeze(-2), self.negative_slope)
        attention = logits.masked_fill(~mask, float('-inf')).softmax(dim=-1)
        return attention @ h + self.bias


@register_detector('GDN')
class GDN(Detector):
    """ Graph deviation network: forecasts the anchor row from the w - 1 preceding rows over a learned
    top-k cosine-similarity graph of the dimensions, and scores the largest normalized forecast error.
    """
    representation_layer = 'graph_layer'

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        self.embedding = nn.Embedding(cfg.input_dims, cfg.latent_size)
        self.graph_layer = GraphAttentionLayer(cfg.window_len - 1, cfg.latent_size)
        self.output = nn.Sequential(nn.Linear(cfg.latent_size, cfg.hidden_size), nn.ReLU(),
                                    nn.Linear(cfg.hidden_size, 1))
        self.register_buffer('score_median', torch.zeros(cfg.input_dims))
        self.register_buffer('score_iqr', torch.ones(cfg.input_dims))

    @classmethod
    def check_config(cls, cfg: ModelConfig) -> None:
        if cfg.window_len < 2:
            raise ModelConfigError(f'GDN forecasts from history and needs window_len >= 2, got {cfg.window_len=}.')

    def select_representation(self, output: Tensor) -> Tensor:
        return output.mean(dim=1)

    def neighbor_mask(self) -> Tensor:
        n = self.cfg.input_dims
        k = min(self.cfg.top_k, n - 1)
        mask = torch.eye(n, dtype=torch.bool, device=self.embedding.weight.device)
        if k > 0:
            with torch.no_grad():
                v = F.normalize(self.embedding.weight, dim=-1)
                similarity = (v @ v.t()).fill_diagonal_(float('-inf'))
                mask.scatter_(1, similarity.topk(k, dim=-1).indices, True)
        return mask

    def forward(self, batch: Tensor) -> Tensor:
        x = batch[:, :-1].transpose(1, 2)
        v = self.embedding.weight
        z = self.graph_layer(x, v, self.neighbor_mask())
        return self.output(F.relu(z) * v).squeeze(-1)

    def losses(self, batch: Tensor, epoch: int) -> LossTerms:
        return [(F.mse_loss(self(batch), batch[:, -1]), None)]

    def score(self, batch: Tensor) -> Tensor:
        error = (self(batch) - batch[:, -1]).abs()
        return ((error - self.score_median).abs() / (self.score_iqr + GDN_IQR_EPS)).max(dim=-1).values

    @torch.no_grad()
    def calibrate(self,
                  windows: Tensor
                  ) -> None:
        errors = torch.cat([(self(batch) - batch[:, -1]).abs()
                            for batch in _batches(windows, self.cfg.batch_size, self.score_median.dtype)])
        quantiles = torch.quantile(errors, torch.tensor([0.25, 0.5, 0.75], dtype=errors.dtype), dim=0)
        self.score_median.copy_(quantiles[1])
        self.score_iqr.copy_(quantiles[2] - quantiles[0])


def _sinusoidal_encoding(length: int,
                         d_model: int
                         ) -> Tensor:
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div_term = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    encoding = torch.zeros(length, d_model, dtype=torch.float64)
    encoding[:, 0::2] = torch.sin(position * div_term)
    encoding[:, 1::2] = torch.cos(position * div_term)[:, :d_model // 2]
    return encoding


@register_detector('TranAD')
class TranAD(Detector):
    """ Transformer encoder with two decoders. Phase one reconstructs the anchor with a zero focus score;
    phase two conditions on the squared phase-one error. At epoch e the loss is
    1/e |x1 - W_anchor|^2 + (1 - 1/e) |x2 - W_anchor|^2.
    """
    representation_layer = 'encoder'
    n_heads = 2

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        d_model = 2 * cfg.input_dims
        self.encoder = nn.TransformerEncoder(
            nn.TransformerEncoderLayer(d_model, self.n_heads, cfg.hidden_size, dropout=0.0, batch_first=True), 1)
        self.decoder1 = nn.TransformerDecoder(
            nn.TransformerDecoderLayer(d_model, self.n_heads, cfg.hidden_size, dropout=0.0, batch_first=True), 1)
        self.decoder2 = nn.TransformerDecoder(
            nn.TransformerDecoderLayer(d_model, self.n_heads, cfg.hidden_size, dropout=0.0, batch_first=True), 1)
        self.output = nn.Sequential(nn.Linear(d_model, cfg.input_dims), nn.Sigmoid())
        self.register_buffer('pos_encoding', _sinusoidal_encoding(cfg.window_len, d_model), persistent=False)

    def select_representation(self, output: Tensor) -> Tensor:
        return output[:, -1]

    def _encode(self,
                src: Tensor,
                focus: Tensor,
                tgt: Tensor
                ) -> Tuple[Tensor, Tensor]:
        x = torch.cat([src, focus], dim=-1) * math.sqrt(self.cfg.input_dims) + self.pos_encoding.to(src.dtype)
        return tgt.repeat(1, 1, 2), self.encoder(x)

    def forward(self, batch: Tensor) -> Tuple[Tensor, Tensor]:
        tgt = batch[:, -1:]
        x1 = self.output(self.decoder1(*self._encode(batch, torch.zeros_like(batch), tgt)))
        x2 = self.output(self.decoder2(*self._encode(batch, (x1 - batch) ** 2, tgt)))
        return x1.squeeze(1), x2.squeeze(1)

    def losses(self, batch: Tensor, epoch: int) -> LossTerms:
        anchor = batch[:, -1]
        x1, x2 = self(batch)
        first = 1 / epoch
        return [(first * F.mse_loss(x1, anchor) + (1 - first) * F.mse_loss(x2, anchor), None)]

    def score(self, batch: Tensor) -> Tensor:
        anchor = batch[:, -1]
        x1, x2 = self(batch)
        return 0.5 * (((x1 - anchor) ** 2).mean(dim=-1) + ((x2 - anchor) ** 2).mean(dim=-1))


def build_detector(cfg: ModelConfig
                   ) -> Detector:
    cfg.validate()
    return _DETECTORS[cfg.kind](cfg).to(torch_dtype(cfg.dtype))


def materialize(params: ParameterSet,
                cfg: ModelConfig
                ) -> Detector:
    """ A detector module holding params.
    """
    # construction draws from the global generator; the draws are overwritten by params
    with seeded(0):
        model = build_detector(cfg)
    return params.load_into(model)


@lru_cache(maxsize=None)
def trainable_names(cfg: ModelConfig
                    ) -> Tuple[str, ...]:
    with seeded(0):
        model = build_detector(cfg)
    return tuple(name for name, _ in model.named_parameters())


def _as_tensors(windows: Union[None, Tensor, WindowSet, Sequence[Union[Tensor, WindowSet]]]
                ) -> List[Tensor]:
    if windows is None:
        return []
    if isinstance(windows, (Tensor, WindowSet)):
        windows = [windows]
    return [w.windows if isinstance(w, WindowSet) else w for w in windows]


def init_model(cfg: ModelConfig,
               seed: int,
               windows: Union[None, Tensor, WindowSet, Sequence[Union[Tensor, WindowSet]]] = None
               ) -> ParameterSet:
    """ Seeded initialization. DeepSVDD also fixes its center to the mean latent vector of windows.

    Args:
        cfg: model config
        seed: initialization seed
        windows: training windows; several sets are pooled

    Returns: ParameterSet with trainable entries and buffers

    """
    with seeded(seed):
        model = build_detector(cfg)
    model.initialize(_as_tensors(windows))
    return ParameterSet.from_module(model)


def num_batches(windows: Union[WindowSet, Tensor],
                batch_size: int
                ) -> int:
    return math.ceil(len(windows) / batch_size)


def _make_optimizer(cfg: ModelConfig,
                    parameters: List[nn.Parameter]
                    ) -> torch.optim.Optimizer:
    if cfg.optimizer == 'sgd':
        return torch.optim.SGD(parameters, lr=cfg.lr)
    return torch.optim.Adam(parameters, lr=cfg.lr)


def batch_gradients(model: Detector,
                    batch: Tensor,
                    epoch: int
                    ) -> Tuple[float, ParameterSet]:
    """ Loss of one batch and its gradient; each loss term contributes only to its own parameter group.
    """
    named = list(model.named_parameters())
    grads = {name: torch.zeros_like(p) for name, p in named}
    total = 0.0
    for loss, group in model.losses(batch, epoch):
        selected = [(name, p) for name, p in named if group is None or name.startswith(group)]
        terms = torch.autograd.grad(loss, [p for _, p in selected], retain_graph=True, allow_unused=True)
        for (name, _), g in zip(selected, terms):
            if g is not None:
                grads[name] += g
        total += float(loss.detach())
    return total, ParameterSet(grads)


def local_train_epoch(params: ParameterSet,
                      cfg: ModelConfig,
                      windows: WindowSet,
                      opt_state: Optional[dict] = None,
                      round_index: int = 0,
                      penalty: Optional[Penalty] = None,
                      correction: Optional[Correction] = None,
                      seed: int = 0
                      ) -> Tuple[ParameterSet, dict, float]:
    """ One pass over windows in a shuffled order fixed by (seed, round_index).

    Args:
        params: starting point
        cfg: model config
        windows: the client's training windows
        opt_state: optimizer state returned by the previous call, if any
        round_index: epoch counter; the two-phase detectors use epoch round_index + 1
        penalty: (model, batch) -> (value, gradient over trainable entries), added to the loss
        correction: maps the gradient before every optimizer step
        seed: client seed

    Returns: updated params, optimizer state, mean loss over batches including the penalty

    """
    model = materialize(params, cfg)
    model.train()
    dtype = torch_dtype(cfg.dtype)
    named = list(model.named_parameters())
    optimizer = _make_optimizer(cfg, [p for _, p in named])
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)

    generator = torch.Generator().manual_seed(derive_seed(seed, 'shuffle', round_index))
    order = torch.randperm(len(windows), generator=generator)
    epoch = round_index + 1
    losses = []
    for batch_index, index in enumerate(order.split(cfg.batch_size)):
        batch = windows.windows[index].to(dtype)
        total, grads = batch_gradients(model, batch, epoch)
        if penalty is not None:
            value, penalty_grads = penalty(model, batch)
            total += float(value)
            grads = grads.add(penalty_grads)
        if not math.isfinite(total):
            raise DivergenceError(batch_index, total)
        if correction is not None:
            grads = correction(grads)
        for name, p in named:
            p.grad = grads[name].detach().to(p.dtype)
        optimizer.step()
        losses.append(total)

    return ParameterSet.from_module(model), copy.deepcopy(optimizer.state_dict()), float(np.mean(losses))


def _validation_tail(windows: Tensor,
                     fraction: float
                     ) -> Tensor:
    n_val = max(1, int(round(len(windows) * fraction)))
    return windows[-n_val:]


def calibrate(params: ParameterSet,
              cfg: ModelConfig,
              windows: Union[Tensor, WindowSet, Sequence[Union[Tensor, WindowSet]]]
              ) -> ParameterSet:
    """ Fit score normalization on the last val_fraction of each training window set; GDN only.
    """
    model = materialize(params, cfg)
    model.eval()
    tails = [_validation_tail(w, cfg.val_fraction) for w in _as_tensors(windows)]
    model.calibrate(torch.cat(tails))
    return ParameterSet.from_module(model)


@torch.no_grad()
def score_windows(params: ParameterSet,
                  cfg: ModelConfig,
                  windows: Union[Tensor, WindowSet]
                  ) -> np.ndarray:
    model = materialize(params, cfg)
    model.eval()
    windows = windows.windows if isinstance(windows, WindowSet) else windows
    dtype = torch_dtype(cfg.dtype)
    return torch.cat([model.score(batch) for batch in _batches(windows, cfg.batch_size, dtype)]).double().numpy()


def score_series(params: ParameterSet,
                 cfg: ModelConfig,
                 test_windows: WindowSet,
                 n_timestamps: Optional[int] = None
                 ) -> np.ndarray:
    """ One anomaly score per test timestamp; timestamps before the first anchor get the first window's score.
    """
    if n_timestamps is None:
        n_timestamps = int(test_windows.anchor_timestamps[-1]) + 1
    scores = expand_scores(score_windows(params, cfg, test_windows), test_windows.anchor_timestamps, n_timestamps)
    if not np.isfinite(scores).all():
        raise NonFiniteScoreError(f'{cfg.kind} produced {int((~np.isfinite(scores)).sum())} non-finite scores.')
    return scores


@torch.no_grad()
def extract_representation(params: ParameterSet,
                           cfg: ModelConfig,
                           batch: Union[Tensor, WindowSet]
                           ) -> Tensor:
    model = materialize(params, cfg)
    model.eval()
    batch = batch.windows if isinstance(batch, WindowSet) else batch
    return model.representation(batch.to(torch_dtype(cfg.dtype)))

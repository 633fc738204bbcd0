"""
ParameterSet: an ordered, named collection of tensors holding one model's state, with the arithmetic
that aggregation and the federated regularizers need.

Text checkpoint format, one line per entry ::

    # fedtsad-params dtype=float32
    encoder.1.weight<TAB>64,250<TAB>0.0123 -0.5 ...
"""
from __future__ import annotations

from collections import OrderedDict
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Tuple, Union

import torch
from torch import Tensor, nn

from .utils import torch_dtype

_HEADER = '# fedtsad-params dtype='


class ShapeMismatchError(ValueError):
    pass


class ParameterSet(object):
    """ Named tensors in a fixed order ::

        params = ParameterSet.from_module(model)
        delta = params.sub(global_params)
        delta.sq_norm()

    Args:
        entries: mapping or (name, tensor) pairs; insertion order is kept
    """

    def __init__(self,
                 entries: Union[Mapping[str, Tensor], Iterable[Tuple[str, Tensor]]]
                 ) -> None:
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries: Dict[str, Tensor] = OrderedDict()
        for name, tensor in items:
            if name in self._entries:
                raise ValueError(f'Duplicate entry {name=}.')
            self._entries[name] = tensor

    @classmethod
    def from_module(cls,
                    module: nn.Module,
                    trainable_only: bool = False,
                    copy: bool = True
                    ) -> ParameterSet:
        """ Parameters and persistent buffers of module in state_dict order.

        Args:
            module: model to read
            trainable_only: skip buffers
            copy: detach and clone; otherwise detached views of the live tensors

        Returns: ParameterSet

        """
        if trainable_only:
            items = [(name, p.detach()) for name, p in module.named_parameters()]
        else:
            items = list(module.state_dict().items())
        if copy:
            items = [(name, t.detach().clone()) for name, t in items]
        return cls(items)

    def load_into(self,
                  module: nn.Module
                  ) -> nn.Module:
        """ Copy the entries into the matching parameters and buffers of module in place.
        """
        targets = module.state_dict(keep_vars=True)
        with torch.no_grad():
            for name, tensor in self.items():
                if name not in targets:
                    raise ShapeMismatchError(f'{name} is not an entry of {type(module).__name__}.')
                if targets[name].shape != tensor.shape:
                    raise ShapeMismatchError(f'{name}: expected shape {tuple(targets[name].shape)}, '
                                             f'but got {tuple(tensor.shape)}.')
                targets[name].copy_(tensor)
        return module

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._entries.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        shapes = ', '.join(f'{name}: {tuple(t.shape)}' for name, t in self.items())
        return f'ParameterSet({shapes})'

    @property
    def numel(self) -> int:
        return sum(t.numel() for t in self._entries.values())

    def check_congruent(self,
                        other: ParameterSet
                        ) -> None:
        if self.names() != other.names():
            missing = set(self.names()) ^ set(other.names())
            raise ShapeMismatchError(f'Entry names differ: {sorted(missing)}' if missing
                                     else 'Entry order differs.')
        for name, tensor in self.items():
            if tensor.shape != other[name].shape:
                raise ShapeMismatchError(f'{name}: {tuple(tensor.shape)} vs {tuple(other[name].shape)}.')

    def _zip_with(self,
                  other: ParameterSet,
                  fn: Callable[[Tensor, Tensor], Tensor]
                  ) -> ParameterSet:
        self.check_congruent(other)
        return ParameterSet([(name, fn(tensor, other[name])) for name, tensor in self.items()])

    def map(self,
            fn: Callable[[Tensor], Tensor]
            ) -> ParameterSet:
        return ParameterSet([(name, fn(tensor)) for name, tensor in self.items()])

    def add(self, other: ParameterSet) -> ParameterSet:
        return self._zip_with(other, torch.add)

    def sub(self, other: ParameterSet) -> ParameterSet:
        return self._zip_with(other, torch.sub)

    def scale(self, factor: float) -> ParameterSet:
        return self.map(lambda t: t * factor)

    def dot(self,
            other: ParameterSet
            ) -> float:
        self.check_congruent(other)
        return float(sum((t * other[name]).sum() for name, t in self.items()))

    def sq_norm(self) -> float:
        return self.dot(self)

    def flatten(self) -> Tensor:
        if not self._entries:
            return torch.empty(0)
        return torch.cat([t.reshape(-1) for t in self._entries.values()])

    def zeros_like(self) -> ParameterSet:
        return self.map(torch.zeros_like)

    def clone(self) -> ParameterSet:
        return self.map(lambda t: t.detach().clone())

    def subset(self,
               names: Iterable[str]
               ) -> ParameterSet:
        return ParameterSet([(name, self[name]) for name in names])

    def to(self, dtype: torch.dtype) -> ParameterSet:
        return self.map(lambda t: t.to(dtype))

    def equal(self,
              other: ParameterSet
              ) -> bool:
        """ Bit-identical entries.
        """
        return self.names() == other.names() and all(torch.equal(t, other[name]) for name, t in self.items())

    def max_abs_diff(self,
                     other: ParameterSet
                     ) -> float:
        self.check_congruent(other)
        return max((float((t - other[name]).abs().max()) for name, t in self.items() if t.numel()), default=0.0)

    def save(self,
             path: Union[str, Path]
             ) -> None:
        dtypes = {str(t.dtype).replace('torch.', '') for t in self._entries.values()} or {'float32'}
        if len(dtypes) != 1:
            raise ValueError(f'Entries must share a dtype, but got {dtypes=}.')
        lines = [_HEADER + dtypes.pop()]
        for name, tensor in self.items():
            shape = ','.join(str(s) for s in tensor.shape)
            values = ' '.join(repr(v) for v in tensor.reshape(-1).tolist())
            lines.append(f'{name}\t{shape}\t{values}')
        Path(path).write_text('\n'.join(lines) + '\n')

    @classmethod
    def load(cls,
             path: Union[str, Path]
             ) -> ParameterSet:
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith(_HEADER):
            raise ValueError(f'{path} is not a parameter checkpoint.')
        dtype = torch_dtype(lines[0][len(_HEADER):])
        entries = []
        for line in lines[1:]:
            if not line:
                continue
            name, shape, values = line.split('\t')
            shape = tuple(int(s) for s in shape.split(',')) if shape else ()
            flat = [float(v) for v in values.split()]
            entries.append((name, torch.tensor(flat, dtype=dtype).reshape(shape)))
        return cls(entries)

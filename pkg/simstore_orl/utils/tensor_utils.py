import logging
import time
from typing import Iterator, Optional

import torch as t
from torch.nn import Module, Parameter

logger = logging.getLogger(__name__)


def shuffled_batches(length: int, batch_size: int,
                     generator: Optional[t.Generator] = None) -> Iterator[t.Tensor]:
    """Index tensors covering range(length) in batches; shuffled iff a generator is given."""
    if generator is None:
        order = t.arange(length)
    else:
        order = t.randperm(length, generator=generator)
    for i in range(0, length, batch_size):
        yield order[i : i + batch_size]


def itpeek(tensor: t.Tensor) -> str:
    """One-line summary of a tensor: shape, mean, std, NaN/Inf flags and leading values."""
    tensor = tensor.detach()
    contains_nan = t.any(t.isnan(tensor)).item()
    contains_inf = t.any(t.isinf(tensor)).item()
    std = t.std(tensor.double()).item() if tensor.numel() > 1 else 0.0
    values = " ".join("{0:.4g}".format(x) for x in t.flatten(tensor)[:10].cpu().tolist())
    return (f"SHAPE {tuple(tensor.shape)} MEAN: {'{0:.4g}'.format(t.mean(tensor.double()).item())} "
            f"STD: {'{0:.4g}'.format(std)} "
            f"{'CONTAINS_NAN! ' if contains_nan else ''}{'CONTAINS_INF! ' if contains_inf else ''}"
            f"VALS [{values}{'...' if tensor.numel() > 10 else ''}]")


class Timer:
    """Context manager logging the wall time of its block."""

    def __init__(self, name: str = "block", log: Optional[logging.Logger] = None,
                 level: int = logging.DEBUG):
        self.name = name
        self.log = log or logger
        self.level = level

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *args):
        self.end = time.perf_counter()
        self.interval = self.end - self.start
        self.log.log(self.level, "%s took %.3fs", self.name, self.interval)


def has_not_null(obj, prop) -> bool:
    return hasattr(obj, prop) and (getattr(obj, prop) is not None)


def copy_weight_bias(mine: Module, theirs: Module):
    """Copy a reference layer's weight and bias into ours (used by parity tests)."""
    mine.weight = Parameter(theirs.weight.detach().clone().to(mine.weight.dtype))
    if has_not_null(theirs, "bias") != has_not_null(mine, "bias"):
        raise AssertionError("only one of the two layers has a bias")
    if has_not_null(mine, "bias"):
        mine.bias = Parameter(theirs.bias.detach().clone().to(mine.bias.dtype))

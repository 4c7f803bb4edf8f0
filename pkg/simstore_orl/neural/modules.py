"""
From-scratch network pieces for the offline policies.

Layers, activations and losses are written out with einsum and elementwise ops rather
than taken from torch.nn / torch.nn.functional; autograd supplies the backward pass.
Everything runs in float64 on CPU.
"""

import copy
import logging
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch as t
from einops import rearrange, reduce
from torch.nn import Module, ModuleList, Parameter
from torchtyping import TensorType

from simstore_orl.errors import ContractViolation

logger = logging.getLogger(__name__)

DTYPE = t.float64
PROB_EPS = 1e-7


def relu(tensor: t.Tensor) -> t.Tensor:
    tensor = tensor.clone()
    tensor[tensor < 0] = 0
    return tensor


def softmax(tensor: t.Tensor, dim: int = -1) -> t.Tensor:
    shifted = tensor - tensor.max(dim=dim, keepdim=True).values.detach()
    exps = t.exp(shifted)
    return exps / exps.sum(dim=dim, keepdim=True)


def logsumexp(tensor: t.Tensor, dim: int = -1) -> t.Tensor:
    peak = tensor.max(dim=dim, keepdim=True).values.detach()
    summed = t.exp(tensor - peak).sum(dim=dim, keepdim=True)
    return (peak + t.log(summed)).squeeze(dim)


def log_softmax(tensor: t.Tensor, dim: int = -1) -> t.Tensor:
    return tensor - logsumexp(tensor, dim=dim).unsqueeze(dim)


def cross_entropy(logits: TensorType["batch", "classes"], target: TensorType["batch"],
                  weights: Optional[TensorType["batch"]] = None) -> t.Tensor:
    """Mean (optionally weighted) negative log-likelihood of ``target`` under ``logits``."""
    gathered = t.gather(logits, -1, target.long().unsqueeze(-1)).squeeze(-1)
    losses = logsumexp(logits, dim=-1) - gathered
    if weights is not None:
        losses = losses * weights
    return t.mean(losses)


def mse(pred: t.Tensor, target: t.Tensor) -> t.Tensor:
    return t.mean((pred - target) ** 2)


def bce(prob: t.Tensor, label: t.Tensor, eps: float = PROB_EPS) -> t.Tensor:
    """Binary cross-entropy written as a negated log-likelihood."""
    prob = t.clamp(prob, eps, 1 - eps)
    label = label.to(prob.dtype)
    return -t.mean(label * t.log(prob) + (1 - label) * t.log(1 - prob))


def quantile_midpoints(num_quantiles: int, dtype=DTYPE) -> TensorType["quantiles"]:
    return (2 * t.arange(num_quantiles, dtype=dtype) + 1) / (2 * num_quantiles)


def quantile_huber(pred: TensorType["batch", "quantiles"],
                   target: TensorType["batch", "target_quantiles"],
                   kappa: float = 1.0) -> t.Tensor:
    """Quantile regression loss with a Huber core, averaged over targets and batch."""
    taus = quantile_midpoints(pred.shape[-1], dtype=pred.dtype)
    errors = rearrange(target, "b j -> b 1 j") - rearrange(pred, "b i -> b i 1")
    abs_errors = errors.abs()
    huber = t.where(abs_errors <= kappa, 0.5 * errors ** 2, kappa * (abs_errors - 0.5 * kappa))
    weight = (rearrange(taus, "i -> 1 i 1") - (errors.detach() < 0).to(pred.dtype)).abs()
    per_pair = weight * huber / kappa
    return reduce(per_pair, "b i j -> b i", "mean").sum(dim=-1).mean()


class Linear(Module):
    """Affine layer with fan-in uniform initialisation."""

    def __init__(self, x: int, y: int, bias: bool = True,
                 generator: Optional[t.Generator] = None):
        super(Linear, self).__init__()
        bound = 1 / np.sqrt(x)
        self.weight = Parameter(
            t.empty(y, x, dtype=DTYPE).uniform_(-bound, bound, generator=generator))
        if bias:
            self.bias = Parameter(t.empty(y, dtype=DTYPE).uniform_(-bound, bound,
                                                                   generator=generator))
        else:
            self.bias = None

    def forward(self, x: t.Tensor) -> t.Tensor:
        x = t.einsum("...j,kj->...k", x, self.weight)
        if self.bias is not None:
            x = x + self.bias
        return x


class Mlp(Module):
    """Rectifier hidden layers, linear output. ``sizes`` lists every layer width."""

    def __init__(self, sizes: Sequence[int], generator: Optional[t.Generator] = None):
        super().__init__()
        if len(sizes) < 2:
            raise ContractViolation(f"an MLP needs at least input and output sizes, got {sizes}")
        self.sizes = [int(size) for size in sizes]
        self.layers = ModuleList(Linear(a, b, generator=generator)
                                 for a, b in zip(self.sizes, self.sizes[1:]))

    @classmethod
    def build(cls, input_size: int, hidden_size: int, num_layers: int, output_size: int,
              generator: Optional[t.Generator] = None) -> "Mlp":
        """``num_layers`` counts affine layers, so there are ``num_layers - 1`` hidden ones."""
        return cls([input_size] + [hidden_size] * (num_layers - 1) + [output_size], generator)

    def forward(self, x: TensorType[..., "features"]) -> TensorType[..., "outputs"]:
        if x.shape[-1] != self.sizes[0]:
            raise ContractViolation(f"expected {self.sizes[0]} input features, got {x.shape[-1]}")
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)


def backward(net: Module, inputs: t.Tensor, output_grad: t.Tensor) -> List[t.Tensor]:
    """Gradients of <net(inputs), output_grad> with respect to every parameter of ``net``."""
    outputs = net(inputs)
    params = list(net.parameters())
    return list(t.autograd.grad(outputs, params, grad_outputs=output_grad, allow_unused=True))


class Adam(t.optim.Optimizer):
    """Bias-corrected Adam. State per parameter: ``step``, ``exp_avg``, ``exp_avg_sq``."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ContractViolation(f"learning rate must be >= 0, got {lr}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps))

    @t.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with t.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for param in group["params"]:
                if param.grad is None:
                    continue
                state = self.state[param]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = t.zeros_like(param)
                    state["exp_avg_sq"] = t.zeros_like(param)
                state["step"] += 1
                grad = param.grad
                state["exp_avg"].mul_(beta1).add_(grad, alpha=1 - beta1)
                state["exp_avg_sq"].mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
                bias_correction1 = 1 - beta1 ** state["step"]
                bias_correction2 = 1 - beta2 ** state["step"]
                denom = (state["exp_avg_sq"].sqrt() / np.sqrt(bias_correction2)).add_(group["eps"])
                param.addcdiv_(state["exp_avg"], denom, value=-group["lr"] / bias_correction1)
        return loss


def adam_step(optimizer: Adam, grads: Sequence[Optional[t.Tensor]]) -> None:
    """Apply one Adam update with explicit gradients, in parameter order."""
    params = [param for group in optimizer.param_groups for param in group["params"]]
    if len(params) != len(grads):
        raise ContractViolation(f"got {len(grads)} gradients for {len(params)} parameters")
    for param, grad in zip(params, grads):
        param.grad = None if grad is None else grad.detach().clone()
    optimizer.step()


class QEnsemble(Module):
    """
    Independently initialised Q-networks whose prediction is the member mean, plus
    a target copy of every member that only changes on ``sync_target``.

    Each member emits ``num_actions * num_quantiles`` values; ``quantiles`` exposes them
    as ``(batch, action, quantile)`` and ``forward`` returns the quantile mean.
    """

    def __init__(self, num_members: int, input_size: int, hidden_size: int, num_layers: int,
                 num_actions: int = 2, num_quantiles: int = 1,
                 generator: Optional[t.Generator] = None):
        super().__init__()
        if num_members < 1 or num_quantiles < 1:
            raise ContractViolation("ensemble size and quantile count must be >= 1")
        self.num_actions = num_actions
        self.num_quantiles = num_quantiles
        self.members = ModuleList(
            Mlp.build(input_size, hidden_size, num_layers, num_actions * num_quantiles, generator)
            for _ in range(num_members))
        self.targets = copy.deepcopy(self.members)
        for param in self.targets.parameters():
            param.requires_grad_(False)

    def _stack(self, members: ModuleList, x: t.Tensor) -> TensorType["batch", "action", "quantile"]:
        stacked = t.stack([member(x) for member in members])
        stacked = rearrange(stacked, "m b (a q) -> m b a q", a=self.num_actions)
        return reduce(stacked, "m b a q -> b a q", "mean")

    def quantiles(self, x: t.Tensor) -> TensorType["batch", "action", "quantile"]:
        return self._stack(self.members, x)

    def forward(self, x: t.Tensor) -> TensorType["batch", "action"]:
        return self.quantiles(x).mean(dim=-1)

    @t.no_grad()
    def target_quantiles(self, x: t.Tensor) -> TensorType["batch", "action", "quantile"]:
        return self._stack(self.targets, x)

    @t.no_grad()
    def target_forward(self, x: t.Tensor) -> TensorType["batch", "action"]:
        return self.target_quantiles(x).mean(dim=-1)

    @t.no_grad()
    def sync_target(self):
        for member, target in zip(self.members, self.targets):
            target.load_state_dict(member.state_dict())

    def online_parameters(self):
        return self.members.parameters()


@t.no_grad()
def bootstrap_quantiles(ensemble: QEnsemble, x: t.Tensor,
                        double_q: bool = False) -> TensorType["batch", "quantile"]:
    """
    Target-network quantiles of the greedy next action. The action is chosen by the
    online network when ``double_q`` is set, otherwise by the target network.
    """
    target = ensemble.target_quantiles(x)
    chooser = ensemble(x) if double_q else target.mean(dim=-1)
    best = chooser.argmax(dim=-1)
    index = rearrange(best, "b -> b 1 1").expand(-1, 1, target.shape[-1])
    return t.gather(target, 1, index).squeeze(1)


def make_generator(seed: int) -> t.Generator:
    generator = t.Generator()
    generator.manual_seed(int(seed))
    return generator

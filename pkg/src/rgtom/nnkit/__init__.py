"""Minimal differentiable computation kit backing the speaker and listeners."""

from rgtom.nnkit import tensor as T
from rgtom.nnkit.checkpoint import load as load_checkpoint
from rgtom.nnkit.checkpoint import save as save_checkpoint
from rgtom.nnkit.functional import PROB_FLOOR, argmax_lowest, cross_entropy, log_softmax, softmax
from rgtom.nnkit.gradcheck import GradReport, grad_check
from rgtom.nnkit.layers import dense, embedding, gru_step, init_dense, init_embedding, init_gru, recurrent_step
from rgtom.nnkit.optim import OptimState, optimizer_step
from rgtom.nnkit.params import ParamStore
from rgtom.nnkit.tensor import Tensor, backward, no_grad

__all__ = [
    "T",
    "Tensor",
    "ParamStore",
    "OptimState",
    "GradReport",
    "PROB_FLOOR",
    "argmax_lowest",
    "backward",
    "no_grad",
    "cross_entropy",
    "dense",
    "embedding",
    "grad_check",
    "gru_step",
    "init_dense",
    "init_embedding",
    "init_gru",
    "load_checkpoint",
    "log_softmax",
    "optimizer_step",
    "recurrent_step",
    "save_checkpoint",
    "softmax",
]

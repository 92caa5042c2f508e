"""Shared numeric fixtures for the gradient checks."""

import numpy as np

from growthcast.convlstm import ConvLstmCell, ConvLstmModel, CellState, ModelConfig
from growthcast.tensor import Parameter, RngStream, cross_entropy_loss, sigmoid_cross_entropy_backward


def random_params(model, rng: RngStream, scale=0.5):
    """Fill every parameter with random float64 values (peepholes/biases start at zero)."""
    for p in model.parameters():
        p.value = rng.normal(p.shape, scale)
        p.grad = np.zeros_like(p.value)


def cell_objective(cell: ConvLstmCell, x, h0, c0, wh, wc):
    """Loss = sum(wh * H) + sum(wc * C) after one step from (h0, c0)."""

    def f():
        state, cache = cell.forward(x, CellState(h0, c0))
        cell.backward(cache, wh, wc)
        return float(np.sum(wh * state.H) + np.sum(wc * state.C))

    return f


def reduced_model(seed: int, steps: int, layers=2, filters=2, size=8, peephole="prev"):
    """A tiny float64 ConvLSTM with random weights; returns ``(model, f, loss)``."""
    rng = RngStream(seed)
    model = ConvLstmModel(ModelConfig(n_layers=layers, filters=filters, seed=seed,
                                      output_peephole=peephole), dtype=np.float64)
    random_params(model, rng)
    seq = rng.random((2, steps, 1, size, size))
    target = (rng.random((2, 1, size, size)) > 0.5).astype(np.float64)

    def f():
        prob, cache = model.forward(seq, training=True)
        model.backward(sigmoid_cross_entropy_backward(prob, target), cache)
        return cross_entropy_loss(prob, target)

    def loss():
        # training-mode forward without backward; running stats are not read
        return cross_entropy_loss(model.forward(seq, training=True)[0], target)

    return model, f, loss


__all__ = ["Parameter", "random_params", "cell_objective", "reduced_model"]

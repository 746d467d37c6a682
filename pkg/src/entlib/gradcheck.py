"""Finite-difference audit of the composed model's gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import Batch, build_vocab, chunk_and_batch, parse_corpus_text
from .model import ModelConfig, ModelParams, forward_batch, init_params
from .training import chunk_loss

# Two scenes of different length (so one chunk is padded), a two-speaker
# utterance and a two-token mention.
TINY_CORPUS = """\
#scene g1
#speakers Ann
hi\t-
I\tE:1\tPRP
saw\t-
Bob\tB:2\tNNP
Smith\tE:2\tNNP

#speakers Ann,Cy
you\tE:3\tPRP
see\t-
me\tE:1\tPRP

#scene g2
#speakers Bob
I\tE:2\tPRP
know\tE:3\tPRP

"""


def tiny_config(variant: str = "EntLib", seed: int = 0) -> ModelConfig:
    return ModelConfig(token_dim=4, entity_dim=3, lstm_dim=5, variant=variant,
                       dropout_input=0.1, dropout_hidden=0.1, seed=seed)


def tiny_problem(variant: str = "EntLib", seed: int = 0) -> tuple[ModelParams, Batch]:
    corpus = parse_corpus_text(TINY_CORPUS)
    vocab = build_vocab(corpus)
    params = init_params(tiny_config(variant, seed), vocab)
    (batch,) = chunk_and_batch(corpus, vocab, batch_scenes=2, chunk_len=757)
    return params, batch


def model_loss(params: ModelParams, batch: Batch, dropout_seed: int = 1) -> ad.Tensor:
    """Training-mode loss with dropout masks fixed by ``dropout_seed``."""
    rng = np.random.default_rng(dropout_seed)
    out = forward_batch(batch, params, params.config, training=True, rng=rng)
    return chunk_loss(out.probs, out.golds)


def analytic_grads(params: ModelParams, batch: Batch, dropout_seed: int = 1) -> dict[str, np.ndarray]:
    params.zero_grad()
    with ad.Tape() as tape:
        loss = model_loss(params, batch, dropout_seed)
        tape.backward(loss)
    grads = {k: (g.copy() if g is not None else np.zeros_like(params[k].data))
             for k, g in params.grads().items()}
    params.zero_grad()
    return grads


def numeric_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = f()
        x[i] = orig - step
        lo = f()
        x[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is zero from being judged
    on finite-difference noise alone.
    """
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass
class GradcheckReport:
    variant: str
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if e > self.tolerance]


def gradcheck_model(variant: str = "EntLib", seed: int = 0, step: float = 1e-5,
                    tolerance: float = 1e-4, corrupt: str | None = None) -> GradcheckReport:
    """Compare backprop gradients with central differences for every parameter group.

    ``corrupt`` names a parameter group whose analytic gradient is perturbed
    before comparison (a negative control).
    """
    params, batch = tiny_problem(variant, seed)
    grads = analytic_grads(params, batch)
    if corrupt is not None:
        if corrupt not in grads:
            raise KeyError(f"unknown parameter group {corrupt!r}")
        grads[corrupt] = grads[corrupt] + 1e-2 * (1.0 + np.abs(grads[corrupt]))
    report = GradcheckReport(params.config.variant, tolerance=tolerance)

    def f():
        return model_loss(params, batch).item()

    for name in params.names():
        num = numeric_grad(f, params[name].data, step)
        report.errors[name] = relative_error(grads[name], num)
    return report

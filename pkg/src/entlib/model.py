"""BiLSTM entity linker with an entity library, and its linear-head ablation.

Both variants embed each token as the concatenation of its token embedding
and the sum of its speakers' embeddings, apply an activation (tanh by
default), run a bidirectional LSTM, and score every span-final mention token:

* ``EntLib``: ``e = h W_o + b``; class scores are the softmax of the cosine
  similarities between ``e`` and the rows of the entity library ``E``.
* ``NoEntLib``: class scores are ``softmax(h W_o + b)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Tensor
from .corpus import Batch, Chunk, DataError, Vocabulary, glorot_uniform

ENTLIB = "EntLib"
NOENTLIB = "NoEntLib"
ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "linear": ad.identity}


@dataclass
class ModelConfig:
    token_dim: int = 300
    entity_dim: int = 134
    lstm_dim: int = 459  # per direction
    variant: str = ENTLIB
    activation: str = "tanh"
    dropout_input: float = 0.008
    dropout_hidden: float = 0.0013
    seed: int = 0

    def __post_init__(self):
        v = str(self.variant).lower()
        if v not in ("entlib", "noentlib"):
            raise ConfigError(f"unknown variant {self.variant!r}; expected EntLib or NoEntLib")
        self.variant = ENTLIB if v == "entlib" else NOENTLIB
        if min(self.token_dim, self.entity_dim, self.lstm_dim) < 1:
            raise ConfigError("all dimensions must be >= 1")
        for rate in (self.dropout_input, self.dropout_hidden):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.token_dim + self.entity_dim

    @property
    def entlib(self) -> bool:
        return self.variant == ENTLIB

    def to_dict(self) -> dict:
        return asdict(self)


LSTM_KEYS = ("W_ih", "W_hh", "b")


@dataclass
class ModelParams:
    """Learned arrays, keyed by name, wrapped as gradient-tracking tensors."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: t.grad for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.copy(), requires_grad=True, name=k)
                                         for k, t in self.tensors.items()})

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls(config, {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                            for k, v in arrays.items()})

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_params(config: ModelConfig, vocab: Vocabulary, pretrained: np.ndarray | None = None,
                seed: int | None = None) -> ModelParams:
    """Fresh parameters; every matrix is Glorot-uniform unless stated.

    Token embeddings are copied from ``pretrained`` when given. LSTM biases
    are zero except the forget gate (one); the head bias is zero. Entity
    library rows are redrawn until none has zero norm.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    V, S, N = len(vocab.tokens), len(vocab.speakers), vocab.n_entities
    d, k = config.lstm_dim, config.entity_dim
    if N < 1:
        raise ConfigError("vocabulary has no entities")
    arrays: dict[str, np.ndarray] = {}
    if pretrained is not None:
        pretrained = np.asarray(pretrained, dtype=np.float64)
        if pretrained.shape != (V, config.token_dim):
            raise ConfigError(f"pretrained matrix has shape {pretrained.shape}, "
                              f"expected {(V, config.token_dim)}")
        arrays["W_t"] = pretrained.copy()
    else:
        arrays["W_t"] = glorot_uniform((V, config.token_dim), rng)
    arrays["W_s"] = glorot_uniform((S, k), rng)
    for direction in ("fwd", "bwd"):
        arrays[f"{direction}.W_ih"] = glorot_uniform((config.input_dim, 4 * d), rng)
        arrays[f"{direction}.W_hh"] = glorot_uniform((d, 4 * d), rng)
        bias = np.zeros(4 * d)
        bias[d:2 * d] = 1.0
        arrays[f"{direction}.b"] = bias
    out = k if config.entlib else N
    arrays["W_o"] = glorot_uniform((2 * d, out), rng)
    arrays["b"] = np.zeros(out)
    if config.entlib:
        E = glorot_uniform((N, k), rng)
        while True:
            bad = np.linalg.norm(E, axis=1) == 0.0
            if not bad.any():
                break
            E[bad] = glorot_uniform((int(bad.sum()), k), rng)
        arrays["E"] = E
    return ModelParams.from_arrays(config, arrays)


def expected_param_count(config: ModelConfig, vocab: Vocabulary) -> int:
    V, S, N = len(vocab.tokens), len(vocab.speakers), vocab.n_entities
    d, k = config.lstm_dim, config.entity_dim
    lstm = 2 * 4 * (d * config.input_dim + d * d + d)
    head = 2 * d * k + k + N * k if config.entlib else 2 * d * N + N
    return V * config.token_dim + S * k + lstm + head


def guard_entity_rows(params: ModelParams, previous: np.ndarray) -> int:
    """Restore any entity-library row whose norm became zero.

    Returns the number of restored rows.
    """
    if "E" not in params.tensors:
        return 0
    E = params["E"].data
    bad = np.linalg.norm(E, axis=1) == 0.0
    if bad.any():
        E[bad] = previous[bad]
    return int(bad.sum())


# ---------------------------------------------------------------------------
# forward pass


def _embed(token_ids: np.ndarray, speaker_rows: np.ndarray, speaker_ids: np.ndarray,
           params: ModelParams, config: ModelConfig, training: bool, rng) -> Tensor:
    n = len(token_ids)
    tok = ad.gather_rows(params["W_t"], token_ids)
    spk = ad.bag_sum(params["W_s"], n, speaker_rows, speaker_ids)
    x = ad.concat([tok, spk], axis=-1)
    x = ad.dropout(x, config.dropout_input, training, rng)
    return ACTIVATIONS[config.activation](x)


def embed_input(token_ids, speaker_sets, params: ModelParams, config: ModelConfig,
                training: bool = False, rng=None) -> Tensor:
    """Activated input vectors for a sequence of positions.

    Args:
        token_ids: token index per position.
        speaker_sets: non-empty collection of speaker indices per position;
            their embeddings are summed.

    Returns:
        ``len(token_ids) x (token_dim + entity_dim)`` tensor.
    """
    token_ids = np.atleast_1d(np.asarray(token_ids, dtype=np.intp))
    rows, ids = [], []
    for i, sset in enumerate(speaker_sets):
        if len(sset) == 0:
            raise DataError(f"position {i} has an empty speaker set")
        rows.extend([i] * len(sset))
        ids.extend(sset)
    if len(speaker_sets) != len(token_ids):
        raise DataError("token and speaker sequences differ in length")
    return _embed(token_ids, np.asarray(rows, dtype=np.intp), np.asarray(ids, dtype=np.intp),
                  params, config, training, rng)


def _lstm_scan(x2: Tensor, B: int, T: int, mask: np.ndarray, params: ModelParams,
               prefix: str, d: int, reverse: bool) -> Tensor:
    W_ih, W_hh, bias = (params[f"{prefix}.{k}"] for k in LSTM_KEYS)
    proj = ad.reshape(ad.add(ad.matmul(x2, W_ih), bias), (B, T, 4 * d))
    h = Tensor(np.zeros((B, d)))
    c = Tensor(np.zeros((B, d)))
    outs: list[Tensor | None] = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        gates = ad.add(proj[:, t, :], ad.matmul(h, W_hh))
        s = ad.sigmoid(gates)
        g = ad.tanh(gates[:, 2 * d:3 * d])
        c_new = ad.add(ad.mul(s[:, d:2 * d], c), ad.mul(s[:, :d], g))
        h_new = ad.mul(s[:, 3 * d:], ad.tanh(c_new))
        m = mask[:, t:t + 1]
        # padded steps leave the state untouched
        c = ad.where(m, c_new, c)
        h = ad.where(m, h_new, h)
        outs[t] = h
    return ad.stack(outs, axis=1)


def bilstm_forward(inputs: Tensor, mask, params: ModelParams, config: ModelConfig,
                   training: bool = False, rng=None) -> Tensor:
    """Run both LSTM directions and concatenate their states per position.

    ``inputs`` is ``B x T x D`` (or ``T x D`` for one sequence) and ``mask``
    marks real tokens. Returns ``B x T x 2d`` (or ``T x 2d``) with hidden
    dropout applied in training mode.
    """
    single = inputs.ndim == 2
    if single:
        inputs = ad.reshape(inputs, (1,) + inputs.shape)
    B, T, D = inputs.shape
    if T == 0:
        raise DataError("bilstm_forward needs a non-empty sequence")
    mask = np.ones((B, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(B, T)
    d = config.lstm_dim
    x2 = ad.reshape(inputs, (B * T, D))
    fwd = _lstm_scan(x2, B, T, mask, params, "fwd", d, reverse=False)
    bwd = _lstm_scan(x2, B, T, mask, params, "bwd", d, reverse=True)
    H = ad.concat([fwd, bwd], axis=-1)
    H = ad.dropout(H, config.dropout_hidden, training, rng)
    return ad.reshape(H, (T, 2 * d)) if single else H


def score_mention(h, params: ModelParams, config: ModelConfig) -> Tensor:
    """Class distribution(s) over the ``N`` entities for hidden state(s) ``h``."""
    h = ad.as_tensor(h)
    logits = ad.add(ad.matmul(h, params["W_o"]), params["b"])
    if config.entlib:
        logits = ad.cosine_rows(params["E"], logits)
    return ad.softmax(logits)


def predict(o) -> np.ndarray | int:
    """Argmax over the last axis; ties go to the lowest index."""
    arr = o.data if isinstance(o, Tensor) else np.asarray(o)
    idx = np.argmax(arr, axis=-1)
    return int(idx) if arr.ndim == 1 else idx


@dataclass
class BatchOutput:
    probs: Tensor            # M x N
    predictions: np.ndarray  # M
    mention_ids: list[str]
    golds: np.ndarray


def forward_batch(batch: Batch, params: ModelParams, config: ModelConfig | None = None,
                  training: bool = False, rng=None) -> BatchOutput:
    config = config or params.config
    N = len(params["E"].data) if config.entlib else params["W_o"].shape[1]
    B, T = batch.tokens.shape
    if batch.n_mentions == 0 or T == 0:
        return BatchOutput(Tensor(np.zeros((0, N))), np.zeros(0, dtype=np.intp), [],
                           batch.golds)
    real = batch.mask.reshape(-1)
    covered = np.bincount(batch.speaker_rows, minlength=B * T) > 0
    if np.any(real & ~covered):
        raise DataError("a token has an empty speaker set")
    x = _embed(batch.tokens.reshape(-1), batch.speaker_rows, batch.speaker_ids,
               params, config, training, rng)
    x = ad.reshape(x, (B, T, config.input_dim))
    H = bilstm_forward(x, batch.mask, params, config, training, rng)
    flat = ad.reshape(H, (B * T, 2 * config.lstm_dim))
    hm = ad.gather_rows(flat, batch.mention_batch * T + batch.mention_pos)
    probs = score_mention(hm, params, config)
    return BatchOutput(probs, predict(probs), list(batch.mention_ids), batch.golds)


def forward_chunk(chunk: Chunk, params: ModelParams, config: ModelConfig | None = None,
                  training: bool = False, rng=None) -> list[tuple[int, np.ndarray, int]]:
    """Per-mention ``(position, distribution, prediction)`` for one chunk."""
    out = forward_batch(Batch.from_chunks([chunk]), params, config, training, rng)
    return [(int(p), out.probs.data[j], int(out.predictions[j]))
            for j, p in enumerate(chunk.mention_positions)]

"""Association matchers: map queries to embeddings, produce match probabilities.

Four interchangeable architectures, from heaviest to lightest:

* ``transformer``  - history rows pass through a single pre-norm encoder
  layer, current rows cross-attend to them in a single pre-norm decoder
  layer, then cosine similarities between decoder and encoder outputs.
* ``crossattn``    - current rows cross-attend to history (residual, no
  layer norm), then cosine similarities against the raw history rows.
* ``ffn``          - cosine similarities of the shared-FFN embeddings.
* ``similarity``   - cosine similarities of the raw queries; holds no
  trainable parameters at all.

All variants divide similarities by a temperature, append a constant
no-match logit column and row-softmax the result, so every row is a
probability distribution over "history rows + start a new trajectory".
The short-term and long-term branches own separate attention weights
but share one embedding FFN.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import Tensor, concat_cols, softmax_rows
from .numerics import (
    AttentionParams,
    FfnParams,
    TransformerLayerParams,
    attention_tensor,
    cosine_matrix_tensor,
    decoder_layer_tensor,
    encoder_layer_tensor,
    ffn_tensor,
)

__all__ = [
    "MatcherVariant",
    "BranchParams",
    "MatcherParams",
    "EmbeddingSet",
    "AssociationMatrix",
    "embed_queries",
    "embed_queries_tensor",
    "association_matrices_tensor",
    "matcher_forward",
    "count_parameters",
]

DEFAULT_TEMPERATURE = 0.1
DEFAULT_NULL_LOGIT = 0.0


class MatcherVariant(str, Enum):
    TRANSFORMER = "transformer"
    SIMILARITY = "similarity"
    FFN = "ffn"
    CROSS_ATTN = "crossattn"


@dataclass
class BranchParams:
    """Per-branch attention weights. Which fields exist depends on the variant."""

    encoder: TransformerLayerParams | None = None
    decoder: TransformerLayerParams | None = None
    attn: AttentionParams | None = None

    def tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        if self.encoder is not None:
            out += self.encoder.tensors()
        if self.decoder is not None:
            out += self.decoder.tensors()
        if self.attn is not None:
            out += self.attn.tensors()
        return out


@dataclass
class MatcherParams:
    variant: MatcherVariant
    d_q: int
    d_e: int
    heads: int = 1
    temperature: float = DEFAULT_TEMPERATURE
    null_logit: float = DEFAULT_NULL_LOGIT
    shared_ffn: FfnParams | None = None
    st: BranchParams | None = None
    lt: BranchParams | None = None

    @classmethod
    def create(
        cls,
        variant: MatcherVariant,
        d_q: int,
        d_e: int,
        heads: int = 1,
        temperature: float = DEFAULT_TEMPERATURE,
        null_logit: float = DEFAULT_NULL_LOGIT,
        rng: np.random.Generator | None = None,
    ) -> "MatcherParams":
        variant = MatcherVariant(variant)
        rng = rng if rng is not None else np.random.default_rng(0)
        if variant is MatcherVariant.SIMILARITY:
            # raw queries are the embeddings, so the two dims must agree
            return cls(variant=variant, d_q=d_q, d_e=d_q, heads=heads, temperature=temperature, null_logit=null_logit)
        shared = FfnParams.create(d_q, d_e, d_e, rng)
        if variant is MatcherVariant.FFN:
            return cls(variant, d_q, d_e, heads, temperature, null_logit, shared, None, None)
        if variant is MatcherVariant.CROSS_ATTN:
            st = BranchParams(attn=AttentionParams.create(d_e, heads, rng))
            lt = BranchParams(attn=AttentionParams.create(d_e, heads, rng))
            return cls(variant, d_q, d_e, heads, temperature, null_logit, shared, st, lt)
        st = BranchParams(
            encoder=TransformerLayerParams.create(d_e, heads, rng),
            decoder=TransformerLayerParams.create(d_e, heads, rng),
        )
        lt = BranchParams(
            encoder=TransformerLayerParams.create(d_e, heads, rng),
            decoder=TransformerLayerParams.create(d_e, heads, rng),
        )
        return cls(variant, d_q, d_e, heads, temperature, null_logit, shared, st, lt)

    def branch(self, name: str) -> BranchParams | None:
        if name == "st":
            return self.st
        if name == "lt":
            return self.lt
        raise ValueError(f"unknown branch {name!r}")

    def tensors(self) -> list[Tensor]:
        """Trainable tensors in checkpoint order: shared FFN, ST branch, LT branch."""
        out: list[Tensor] = []
        if self.shared_ffn is not None:
            out += self.shared_ffn.tensors()
        if self.st is not None:
            out += self.st.tensors()
        if self.lt is not None:
            out += self.lt.tensors()
        return out


@dataclass
class EmbeddingSet:
    """Embedding rows plus a (frame, tag) provenance tuple per row."""

    embeddings: np.ndarray  # (n, d_e)
    provenance: list[tuple[int, int]]

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @classmethod
    def empty(cls, d_e: int) -> "EmbeddingSet":
        return cls(embeddings=np.zeros((0, d_e)), provenance=[])


@dataclass
class AssociationMatrix:
    """Similarities and row-softmax probabilities, last column = no match."""

    scores: np.ndarray  # (n_cur, n_hist + 1)
    probabilities: np.ndarray  # same shape, rows sum to 1

    @property
    def null_column(self) -> int:
        return self.scores.shape[1] - 1


def embed_queries_tensor(queries: Tensor, params: MatcherParams) -> Tensor:
    if params.variant is MatcherVariant.SIMILARITY:
        return queries
    return ffn_tensor(queries, params.shared_ffn)


def embed_queries(
    queries: np.ndarray,
    params: MatcherParams,
    provenance: list[tuple[int, int]] | None = None,
) -> EmbeddingSet:
    """Map instance queries (n, d_q) to association embeddings (n, d_e)."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise ValueError("queries must be a 2D matrix")
    if queries.shape[0] == 0:
        return EmbeddingSet(np.zeros((0, params.d_e)), [])
    if queries.shape[1] != params.d_q:
        raise ValueError(f"query dim {queries.shape[1]} does not match matcher d_q {params.d_q}")
    emb = embed_queries_tensor(Tensor(queries), params).value
    prov = provenance if provenance is not None else [(0, i) for i in range(queries.shape[0])]
    if len(prov) != emb.shape[0]:
        raise ValueError("provenance length does not match row count")
    return EmbeddingSet(embeddings=emb, provenance=list(prov))


def association_matrices_tensor(
    params: MatcherParams,
    current: Tensor,
    history: Tensor,
    branch: str,
) -> tuple[Tensor, Tensor]:
    """Return (scores with null column, probabilities) as graph tensors.

    Empty history forces the whole probability mass onto the null
    column; empty current yields empty matrices.
    """
    n_cur = current.shape[0]
    n_hist = history.shape[0]
    if n_cur == 0:
        empty = Tensor(np.zeros((0, n_hist + 1)))
        return empty, empty
    if n_hist == 0:
        scores = Tensor(np.full((n_cur, 1), params.null_logit))
        return scores, Tensor(np.ones((n_cur, 1)))

    variant = params.variant
    if variant in (MatcherVariant.SIMILARITY, MatcherVariant.FFN):
        sims = cosine_matrix_tensor(current, history)
    elif variant is MatcherVariant.CROSS_ATTN:
        b = params.branch(branch)
        attended = current + attention_tensor(current, history, history, b.attn)
        sims = cosine_matrix_tensor(attended, history)
    elif variant is MatcherVariant.TRANSFORMER:
        b = params.branch(branch)
        encoded = encoder_layer_tensor(history, b.encoder)
        decoded = decoder_layer_tensor(current, encoded, b.decoder)
        sims = cosine_matrix_tensor(decoded, encoded)
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown variant {variant}")

    scaled = sims * (1.0 / params.temperature)
    null = Tensor(np.full((n_cur, 1), params.null_logit))
    scores = concat_cols([scaled, null])
    return scores, softmax_rows(scores)


def matcher_forward(
    current: EmbeddingSet,
    history: EmbeddingSet,
    params: MatcherParams,
    branch: str = "st",
) -> AssociationMatrix:
    """Match probabilities of each current row against history rows + null."""
    scores, probs = association_matrices_tensor(
        params, Tensor(current.embeddings), Tensor(history.embeddings), branch
    )
    return AssociationMatrix(scores=scores.value, probabilities=probs.value)


def count_parameters(variant: MatcherVariant, d_q: int, d_e: int, heads: int = 1) -> int:
    """Exact trainable-parameter count for a matcher (both branches + shared FFN).

    Closed forms, writing d for d_e:
      similarity:   0
      ffn:          d_q*d + d^2 + 2d                 (shared FFN only)
      crossattn:    ffn + 2*(4d^2 + 4d)              (one attention block per branch)
      transformer:  ffn + 2*2*(6d^2 + 10d)           (encoder + decoder layer per branch)
    Head count partitions dimensions and adds no weights.
    """
    variant = MatcherVariant(variant)
    if d_q <= 0 or d_e <= 0 or heads <= 0 or d_e % heads != 0:
        raise ValueError("invalid dimensions")
    if variant is MatcherVariant.SIMILARITY:
        return 0
    shared = FfnParams.count(d_q, d_e, d_e)
    if variant is MatcherVariant.FFN:
        return shared
    if variant is MatcherVariant.CROSS_ATTN:
        return shared + 2 * AttentionParams.count(d_e)
    return shared + 2 * 2 * TransformerLayerParams.count(d_e)

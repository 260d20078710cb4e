"""A small vision-language decoder.

Vision: non-overlapping patches -> linear embedding + learned positions ->
a few bidirectional pre-norm blocks. Language: token + position embeddings
-> ``layers`` pre-norm residual layers, where the layers listed in
``cross_layers`` attend to the vision embedding instead of to the text ->
final norm -> vocabulary head. Cross-attention layers may be handed a
replacement (fused) vision embedding.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import VlmConfig
from .errors import ConfigError, DimensionError
from .tensor import Embedding, LayerNorm, Linear, Module, ModuleList, Parameter, Tensor, no_grad
from .tensor import ops
from .vocab import Vocabulary

logger = logging.getLogger(__name__)


# ============================================================================
# Token sequences
# ============================================================================
@dataclass
class TokenSequence:
    """``<bos> prompt... response... [<eos>]``; ``boundary`` is the index of the first response token."""

    ids: np.ndarray
    boundary: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not 0 < self.boundary <= len(self.ids):
            raise DimensionError(f"boundary {self.boundary} outside sequence of length {len(self.ids)}")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_text(cls, vocab: Vocabulary, prompt: str, response: Optional[str] = None) -> "TokenSequence":
        head = [vocab.bos_id] + vocab.encode(prompt)
        tail = [] if response is None else vocab.encode(response) + [vocab.eos_id]
        return cls(np.array(head + tail), len(head))


@dataclass
class TokenBatch:
    """Right-padded batch. ``ids`` is ``[B, T]``; the model reads ``ids[:, :-1]`` and predicts ``ids[:, 1:]``."""

    ids: np.ndarray
    boundaries: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_sequences(cls, seqs: list[TokenSequence], pad_id: int = 0) -> "TokenBatch":
        if not seqs:
            raise DimensionError("cannot batch zero sequences")
        width = max(len(s) for s in seqs)
        ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s.ids
        return cls(
            ids,
            np.array([s.boundary for s in seqs], dtype=np.int64),
            np.array([len(s) for s in seqs], dtype=np.int64),
        )

    def __len__(self):
        return self.ids.shape[0]

    def inputs(self) -> np.ndarray:
        return self.ids[:, :-1]

    def targets(self) -> np.ndarray:
        return self.ids[:, 1:]

    def loss_weights(self) -> np.ndarray:
        """1 where the predicted token (position t + 1) belongs to a response."""
        nxt = np.arange(1, self.ids.shape[1])[None, :]
        return ((nxt >= self.boundaries[:, None]) & (nxt < self.lengths[:, None])).astype(np.float64)

    def prompt_weights(self) -> np.ndarray:
        """1 on input positions holding ``<bos>`` or prompt tokens."""
        pos = np.arange(self.ids.shape[1] - 1)[None, :]
        return (pos < self.boundaries[:, None]).astype(np.float64)


def as_batch(tokens: TokenSequence | TokenBatch) -> TokenBatch:
    return tokens if isinstance(tokens, TokenBatch) else TokenBatch.from_sequences([tokens])


# ============================================================================
# Blocks
# ============================================================================
class Attention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float32):
        super().__init__()
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.o = Linear(dim, dim, rng, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return ops.transpose(ops.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def forward(self, x: Tensor, context: Tensor, causal: bool = False) -> Tensor:
        b, t, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        scores = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / np.sqrt(d // self.heads))
        mask = np.tril(np.ones((t, context.shape[1]), dtype=bool)) if causal else None
        out = ops.matmul(ops.softmax_rows(scores, mask), v)
        return self.o(ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, t, d)))


class MLP(Module):
    def __init__(self, dim: int, ratio: int, rng, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(dim, dim * ratio, rng, dtype=dtype)
        self.fc2 = Linear(dim * ratio, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))


class Block(Module):
    """Pre-norm residual block: attention (self, causal self or cross) then MLP."""

    def __init__(self, cfg: VlmConfig, rng, kind: str, dtype=np.float32):
        super().__init__()
        self.kind = kind
        self.norm1 = LayerNorm(cfg.embed_dim, dtype=dtype)
        self.attn = Attention(cfg.embed_dim, cfg.heads, rng, dtype)
        self.norm2 = LayerNorm(cfg.embed_dim, dtype=dtype)
        self.mlp = MLP(cfg.embed_dim, cfg.mlp_ratio, rng, dtype)

    def forward(self, x: Tensor, vision: Optional[Tensor] = None) -> Tensor:
        h = self.norm1(x)
        if self.kind == "cross":
            a = self.attn(h, vision)
        else:
            a = self.attn(h, h, causal=self.kind == "causal")
        x = ops.add(x, a)
        return ops.add(x, self.mlp(self.norm2(x)))


@dataclass
class DecoderOutput:
    logits: Tensor  # [B, T, V]
    hidden: dict[int, Tensor]  # cross-attention layer index -> [B, T, d]


# ============================================================================
# Model
# ============================================================================
class MiniVLM(Module):
    def __init__(self, cfg: VlmConfig, image_channels: int, image_size: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if cfg.vocab_size is None:
            raise ConfigError("vocab_size must be set before building the model")
        if image_size % cfg.patch_size:
            raise ConfigError(f"image size {image_size} is not divisible by patch size {cfg.patch_size}")
        self.cfg = cfg
        self.cross_layers = frozenset(cfg.cross_layers)
        patches = (image_size // cfg.patch_size) ** 2
        d = cfg.embed_dim

        self.patch_embed = Linear(image_channels * cfg.patch_size**2, d, rng, dtype=dtype)
        self.vision_pos = Parameter(rng.normal(0.0, 0.02, (patches, d)), dtype=dtype)
        self.vision_blocks = ModuleList([Block(cfg, rng, "self", dtype) for _ in range(cfg.vision_layers)])
        self.vision_norm = LayerNorm(d, dtype=dtype)

        self.tok_embed = Embedding(cfg.vocab_size, d, rng, dtype=dtype)
        self.pos_embed = Embedding(cfg.max_seq_len, d, rng, dtype=dtype)
        self.layers = ModuleList(
            [Block(cfg, rng, "cross" if i in self.cross_layers else "causal", dtype) for i in range(cfg.layers)]
        )
        self.final_norm = LayerNorm(d, dtype=dtype)
        self.lm_head = Linear(d, cfg.vocab_size, rng, dtype=dtype)

    def encode_vision(self, images: Tensor) -> Tensor:
        """``[N, C, H, W] -> [N, T, d]`` (``[C, H, W] -> [T, d]``)."""
        x = ops.as_tensor(images)
        unbatched = x.ndim == 3
        if unbatched:
            x = ops.reshape(x, (1,) + x.shape)
        patches = ops.unfold_patches(x, self.cfg.patch_size)
        if patches.shape[1] != self.vision_pos.shape[0]:
            raise DimensionError(
                f"image gives {patches.shape[1]} patches, model was built for {self.vision_pos.shape[0]}"
            )
        h = ops.add_bias(self.patch_embed(patches), self.vision_pos)
        for block in self.vision_blocks:
            h = block(h)
        h = self.vision_norm(h)
        return ops.reshape(h, h.shape[1:]) if unbatched else h

    def decode_forward(
        self,
        ids: np.ndarray,
        vision: Tensor,
        fusion_inputs: Optional[dict[int, Tensor]] = None,
    ) -> DecoderOutput:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None]
        if vision.ndim == 2:
            vision = ops.reshape(vision, (1,) + vision.shape)
        b, t = ids.shape
        if t > self.cfg.max_seq_len:
            raise DimensionError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        if vision.shape[0] != b:
            raise DimensionError(f"{b} token rows but {vision.shape[0]} vision embeddings")
        fusion_inputs = fusion_inputs or {}
        stray = sorted(set(fusion_inputs) - self.cross_layers)
        if stray:
            raise ConfigError(f"fusion inputs given for layers {stray}, which are not cross-attention layers")

        x = ops.add_bias(self.tok_embed(ids), self.pos_embed(np.arange(t)))
        hidden = {}
        for i, layer in enumerate(self.layers):
            if i in self.cross_layers:
                ctx = fusion_inputs.get(i, vision)
                if ctx.ndim == 2:
                    ctx = ops.reshape(ctx, (1,) + ctx.shape)
                x = layer(x, ctx)
                hidden[i] = x
            else:
                x = layer(x)
        return DecoderOutput(self.lm_head(self.final_norm(x)), hidden)

    def generate_ids(
        self,
        prompt: TokenSequence,
        vision: Tensor,
        fusion_inputs: Optional[dict[int, Tensor]],
        max_new: int,
        eos_id: int,
    ) -> list[int]:
        """Greedy decoding from the prompt; stops after ``max_new`` tokens or at ``eos_id``."""
        if prompt.boundary + max_new > self.cfg.max_seq_len:
            raise DimensionError(
                f"prompt of {prompt.boundary} tokens + {max_new} new exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        ids = list(prompt.ids[: prompt.boundary])
        out = []
        with no_grad():
            for _ in range(max_new):
                logits = self.decode_forward(np.array([ids]), vision, fusion_inputs).logits
                nxt = int(np.argmax(logits.data[0, -1]))
                if nxt == eos_id:
                    break
                out.append(nxt)
                ids.append(nxt)
        return out

    def generate(
        self,
        prompt: TokenSequence,
        vision: Tensor,
        fusion_inputs: Optional[dict[int, Tensor]],
        max_new: int,
        vocab: Vocabulary,
    ) -> str:
        return vocab.decode(self.generate_ids(prompt, vision, fusion_inputs, max_new, vocab.eos_id))


def lm_loss(logits: Tensor, tokens: TokenSequence | TokenBatch) -> Tensor:
    """Next-token cross-entropy averaged over response positions only."""
    batch = as_batch(tokens)
    weights = batch.loss_weights()
    if logits.ndim == 2:
        logits = ops.reshape(logits, (1,) + logits.shape)
    if weights.sum() == 0:
        raise DimensionError("response region is empty")
    return ops.cross_entropy(logits, batch.targets(), weights)

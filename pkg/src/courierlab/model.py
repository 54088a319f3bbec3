"""Manual-conditioned autoregressive world models.

An encoder-decoder transformer over token-block sequences.  The manual
encoder self-attends within each description separately; the decoder
applies causal self-attention over the flattened block tokens.  Five
variants differ only in how the manual reaches the decoder:

  emma          -- per-description key/value pooling, identity-queried
                   dot attention, routed features added to identity
                   embeddings; no cross-attention
  standard      -- multi-headed cross-attention to all word vectors
  observational -- manual representation zeroed out
  hardroute     -- pooled values routed by a (noisy) parsed identity
  oracleparse   -- canonical three-word parses, exact routing

Gradients flow through plain torch autograd; tests check them against
central finite differences at float64.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokens import ACTION_SLOT, BLOCK_TOKENS, CONTEXT_BLOCKS, Vocab

VARIANTS = ("emma", "standard", "hardroute", "oracleparse", "observational")

IDENTITY_SLOTS = tuple(1 + 3 * c for c in range(4))


@dataclass
class ModelSpec:
    variant: str
    d_model: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    context_blocks: int = CONTEXT_BLOCKS
    grid_size: int = 10
    channels: int = 4
    word_vocab_size: int = 128
    max_words: int = 16
    per_desc_error: float = 0.035
    seed: int = 0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.d_model % self.heads:
            raise ValueError("d_model must divide evenly into heads")

    @property
    def token_vocab_size(self) -> int:
        return Vocab(grid_size=self.grid_size).size

    @property
    def max_positions(self) -> int:
        return self.context_blocks * BLOCK_TOKENS

    @classmethod
    def desk(cls, variant: str, word_vocab_size: int, max_words: int, seed: int = 0, **kw) -> "ModelSpec":
        return cls(
            variant=variant,
            d_model=64,
            encoder_layers=2,
            decoder_layers=2,
            heads=4,
            dropout=0.1,
            word_vocab_size=word_vocab_size,
            max_words=max_words,
            seed=seed,
            **kw,
        )

    @classmethod
    def paper(cls, variant: str, word_vocab_size: int, max_words: int, seed: int = 0, **kw) -> "ModelSpec":
        return cls(
            variant=variant,
            d_model=256,
            encoder_layers=4,
            decoder_layers=4,
            heads=8,
            dropout=0.1,
            word_vocab_size=word_vocab_size,
            max_words=max_words,
            seed=seed,
            **kw,
        )

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def init_weights(module: nn.Module) -> None:
    """normal(0, 0.02) for linear/embedding weights, zeros for biases,
    ones/zeros for layer norms."""
    if isinstance(module, (nn.Linear, nn.Embedding)):
        module.weight.data.normal_(mean=0.0, std=0.02)
        if isinstance(module, nn.Linear) and module.bias is not None:
            module.bias.data.zero_()
    elif isinstance(module, nn.LayerNorm):
        module.bias.data.zero_()
        module.weight.data.fill_(1.0)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = dropout

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, s, _ = x.shape
        return x.view(b, s, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        causal: bool = False,
        key_padding_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(key)), self._split(self.v_proj(value))
        attn_mask = None
        if key_padding_mask is not None:
            # True = keep; expand to (B, 1, 1, S_k)
            attn_mask = key_padding_mask[:, None, None, :]
        out = F.scaled_dot_product_attention(
            q,
            k,
            v,
            attn_mask=attn_mask,
            is_causal=causal,
            dropout_p=self.dropout if self.training else 0.0,
        )
        b, _, s, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, s, -1))

    def forward_cached(
        self,
        query: torch.Tensor,
        cache_k: torch.Tensor,
        cache_v: torch.Tensor,
        new_key: torch.Tensor,
        new_value: torch.Tensor,
        length: int,
    ) -> tuple[torch.Tensor, int]:
        """Append projected new_key/new_value to the cache in place and
        attend causally from the appended queries over the prefix."""
        k_new = self._split(self.k_proj(new_key))
        v_new = self._split(self.v_proj(new_value))
        n = k_new.shape[2]
        cache_k[:, :, length : length + n] = k_new
        cache_v[:, :, length : length + n] = v_new
        total = length + n
        q = self._split(self.q_proj(query))
        attn_mask = None
        if n > 1:
            device = query.device
            allowed = (
                torch.arange(total, device=device)[None, :]
                <= (length + torch.arange(n, device=device))[:, None]
            )
            attn_mask = allowed[None, None]
        out = F.scaled_dot_product_attention(
            q, cache_k[:, :, :total], cache_v[:, :, :total], attn_mask=attn_mask
        )
        b, _, s, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, s, -1)), total


class FeedForward(nn.Module):
    def __init__(self, d_model: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, 4 * d_model)
        self.fc2 = nn.Linear(4 * d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, dropout)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad_keep: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, h, key_padding_mask=pad_keep))
        x = x + self.drop(self.ff(self.ln2(x)))
        return x


class ManualEncoder(nn.Module):
    """Word embeddings + positions + per-description self-attention."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.word_emb = nn.Embedding(spec.word_vocab_size, spec.d_model)
        self.pos_emb = nn.Embedding(spec.max_words, spec.d_model)
        self.layers = nn.ModuleList(
            EncoderLayer(spec.d_model, spec.heads, spec.dropout)
            for _ in range(spec.encoder_layers)
        )
        self.ln = nn.LayerNorm(spec.d_model)
        self.drop = nn.Dropout(spec.dropout)

    def forward(
        self, word_ids: torch.Tensor, word_mask: torch.Tensor
    ) -> torch.Tensor:
        """word_ids (B, N, L) -> encodings (B, N, L, D); each description
        attends only within itself."""
        b, n, length = word_ids.shape
        flat_ids = word_ids.reshape(b * n, length)
        flat_mask = word_mask.reshape(b * n, length)
        pos = torch.arange(length, device=word_ids.device)
        x = self.word_emb(flat_ids) + self.pos_emb(pos)[None]
        x = self.drop(x)
        for layer in self.layers:
            x = layer(x, flat_mask)
        x = self.ln(x)
        return x.view(b, n, length, -1)


class DescriptionPooler(nn.Module):
    """Scalar-score softmax pooling over words, once for keys and once
    for values; each pooled row is a convex combination of its
    description's word vectors."""

    def __init__(self, d_model: int):
        super().__init__()
        self.key_score = nn.Linear(d_model, 1)
        self.val_score = nn.Linear(d_model, 1)

    @staticmethod
    def _pool(
        scores: torch.Tensor, m_enc: torch.Tensor, word_mask: torch.Tensor
    ) -> torch.Tensor:
        scores = scores.masked_fill(~word_mask[..., None], float("-inf"))
        weights = torch.softmax(scores, dim=-2)
        return (weights * m_enc).sum(dim=-2)

    def forward(
        self, m_enc: torch.Tensor, word_mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """m_enc (B, N, L, D) -> (m_key, m_val), each (B, N, D)."""
        m_key = self._pool(self.key_score(m_enc), m_enc, word_mask)
        m_val = self._pool(self.val_score(m_enc), m_enc, word_mask)
        return m_key, m_val


def attend_descriptions(
    queries: torch.Tensor, m_key: torch.Tensor, m_val: torch.Tensor
) -> torch.Tensor:
    """Scaled dot-product attention of identity queries over pooled
    descriptions.

    queries (B, S, D), m_key/m_val (B, N, D) -> (B, S, D)
    """
    d = queries.shape[-1]
    scores = torch.einsum("bsd,bnd->bsn", queries, m_key) / math.sqrt(d)
    weights = torch.softmax(scores, dim=-1)
    return torch.einsum("bsn,bnd->bsd", weights, m_val)


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float, cross: bool):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads, dropout)
        self.cross_attn = (
            MultiHeadAttention(d_model, heads, dropout) if cross else None
        )
        self.ln_cross = nn.LayerNorm(d_model) if cross else None
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: Optional[torch.Tensor] = None,
        memory_keep: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.drop(self.self_attn(h, h, h, causal=True))
        if self.cross_attn is not None and memory is not None:
            h = self.ln_cross(x)
            x = x + self.drop(
                self.cross_attn(h, memory, memory, key_padding_mask=memory_keep)
            )
        x = x + self.drop(self.ff(self.ln2(x)))
        return x


@dataclass
class ManualContext:
    """Per-sequence conditioning tensors, fixed across time."""

    m_key: Optional[torch.Tensor] = None  # (B, N, D)
    m_val: Optional[torch.Tensor] = None  # (B, N, D)
    memory: Optional[torch.Tensor] = None  # (B, N*L, D) for cross-attention
    memory_keep: Optional[torch.Tensor] = None  # (B, N*L)
    routed_z: Optional[torch.Tensor] = None  # (B, C, D) for hard routing


@dataclass
class GenerationCache:
    """Preallocated per-layer KV cache for incremental decoding."""

    keys: list[torch.Tensor]
    values: list[torch.Tensor]
    length: int
    context: ManualContext


class WorldModel(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.vocab = Vocab(grid_size=spec.grid_size)
        self.token_emb = nn.Embedding(spec.token_vocab_size, spec.d_model)
        self.pos_emb = nn.Embedding(spec.max_positions, spec.d_model)
        uses_text = spec.variant in ("emma", "standard", "hardroute", "oracleparse")
        self.encoder = ManualEncoder(spec) if uses_text else None
        self.pooler = (
            DescriptionPooler(spec.d_model)
            if spec.variant in ("emma", "hardroute", "oracleparse")
            else None
        )
        cross = spec.variant == "standard"
        self.layers = nn.ModuleList(
            DecoderLayer(spec.d_model, spec.heads, spec.dropout, cross)
            for _ in range(spec.decoder_layers)
        )
        self.ln_final = nn.LayerNorm(spec.d_model)
        self.head = nn.Linear(spec.d_model, spec.token_vocab_size)
        self.drop = nn.Dropout(spec.dropout)
        torch.manual_seed(spec.seed)
        self.apply(init_weights)

    # -- manual conditioning -------------------------------------------

    def encode_manual(
        self, word_ids: torch.Tensor, word_mask: torch.Tensor
    ) -> torch.Tensor:
        if self.encoder is None:
            raise RuntimeError("observational variant has no manual encoder")
        return self.encoder(word_ids, word_mask)

    def manual_context(
        self,
        word_ids: Optional[torch.Tensor],
        word_mask: Optional[torch.Tensor],
        route: Optional[torch.Tensor],
    ) -> ManualContext:
        variant = self.spec.variant
        if variant == "observational" or word_ids is None:
            return ManualContext()
        m_enc = self.encode_manual(word_ids, word_mask)
        if variant == "standard":
            b, n, length, d = m_enc.shape
            return ManualContext(
                memory=m_enc.reshape(b, n * length, d),
                memory_keep=word_mask.reshape(b, n * length),
            )
        m_key, m_val = self.pooler(m_enc, word_mask)
        if variant == "emma":
            return ManualContext(m_key=m_key, m_val=m_val)
        # hardroute / oracleparse: z per channel is the routed value (or 0)
        b, n, d = m_val.shape
        channels = self.spec.channels
        routed = torch.zeros(b, channels, d, dtype=m_val.dtype, device=m_val.device)
        keep = route >= 0
        safe = route.clamp(min=0)
        gathered = torch.gather(
            m_val, 1, safe.unsqueeze(-1).expand(b, channels, d)
        )
        routed = torch.where(keep.unsqueeze(-1), gathered, routed)
        return ManualContext(routed_z=routed)

    def _identity_feature(
        self, tokens: torch.Tensor, emb: torch.Tensor, ctx: ManualContext
    ) -> torch.Tensor:
        """Additive z for every identity slot; zeros elsewhere.

        tokens (B, T, 15), emb (B, T, 15, D).
        """
        b, t, _, d = emb.shape
        z = torch.zeros_like(emb)
        if ctx.m_key is not None:
            slots = emb[:, :, IDENTITY_SLOTS, :].reshape(b, t * len(IDENTITY_SLOTS), d)
            routed = attend_descriptions(slots, ctx.m_key, ctx.m_val)
            z[:, :, IDENTITY_SLOTS, :] = routed.view(b, t, len(IDENTITY_SLOTS), d)
        elif ctx.routed_z is not None:
            z[:, :, IDENTITY_SLOTS, :] = ctx.routed_z[:, None, :, :]
        return z

    # -- full teacher-forced forward -------------------------------------

    def forward(
        self,
        tokens: torch.Tensor,
        word_ids: Optional[torch.Tensor] = None,
        word_mask: Optional[torch.Tensor] = None,
        route: Optional[torch.Tensor] = None,
        ctx: Optional[ManualContext] = None,
    ) -> torch.Tensor:
        """tokens (B, T, 15) -> next-token logits (B, T*15, V)."""
        b, t, k = tokens.shape
        if k != BLOCK_TOKENS:
            raise ValueError(f"blocks must have {BLOCK_TOKENS} tokens")
        if t > self.spec.context_blocks:
            raise ValueError(
                f"{t} blocks exceed the context budget {self.spec.context_blocks}"
            )
        if ctx is None:
            ctx = self.manual_context(word_ids, word_mask, route)
        emb = self.token_emb(tokens)
        emb = emb + self._identity_feature(tokens, emb, ctx)
        x = emb.view(b, t * k, -1)
        pos = torch.arange(t * k, device=tokens.device)
        x = self.drop(x + self.pos_emb(pos)[None])
        for layer in self.layers:
            x = layer(x, ctx.memory, ctx.memory_keep)
        return self.head(self.ln_final(x))

    # -- incremental decoding ---------------------------------------------

    def start_cache(self, ctx: ManualContext, batch: int) -> GenerationCache:
        device = next(self.parameters()).device
        dtype = next(self.parameters()).dtype
        shape = (
            batch,
            self.spec.heads,
            self.spec.max_positions,
            self.spec.d_model // self.spec.heads,
        )
        return GenerationCache(
            keys=[torch.zeros(shape, dtype=dtype, device=device) for _ in self.layers],
            values=[torch.zeros(shape, dtype=dtype, device=device) for _ in self.layers],
            length=0,
            context=ctx,
        )

    @torch.no_grad()
    def extend(self, cache: GenerationCache, tokens_flat: torch.Tensor) -> torch.Tensor:
        """Feed tokens at positions [cache.length, ...); return logits at
        the final fed position.  tokens_flat is (B, n) flat token ids.
        """
        b, n = tokens_flat.shape
        start = cache.length
        slots = (torch.arange(start, start + n, device=tokens_flat.device)) % BLOCK_TOKENS
        emb = self.token_emb(tokens_flat)
        ctx = cache.context
        is_identity = torch.isin(
            slots, torch.tensor(IDENTITY_SLOTS, device=slots.device)
        )
        if is_identity.any():
            if ctx.m_key is not None:
                routed = attend_descriptions(emb, ctx.m_key, ctx.m_val)
                emb = torch.where(is_identity[None, :, None], emb + routed, emb)
            elif ctx.routed_z is not None:
                channel = ((slots - 1) // 3).clamp(min=0, max=self.spec.channels - 1)
                z = ctx.routed_z[:, channel, :]
                emb = torch.where(is_identity[None, :, None], emb + z, emb)
        pos = torch.arange(start, start + n, device=tokens_flat.device)
        x = emb + self.pos_emb(pos)[None]
        total = start
        for i, layer in enumerate(self.layers):
            h = layer.ln1(x)
            attn, total = layer.self_attn.forward_cached(
                h, cache.keys[i], cache.values[i], h, h, start
            )
            x = x + attn
            if layer.cross_attn is not None and ctx.memory is not None:
                h = layer.ln_cross(x)
                x = x + layer.cross_attn(
                    h, ctx.memory, ctx.memory, key_padding_mask=ctx.memory_keep
                )
            x = x + layer.ff(layer.ln2(x))
        cache.length = total
        return self.head(self.ln_final(x[:, -1]))


def masked_loss(
    logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean cross-entropy over unmasked target positions.

    logits (B, S, V) predict the NEXT token: position p scores token
    p+1.  mask marks target positions (per the tokenizer's rule) and
    must be False at padding.
    """
    b, s, v = logits.shape
    flat_tokens = tokens.reshape(b, -1)
    flat_mask = mask.reshape(b, -1)
    targets = flat_tokens[:, 1:]
    target_mask = flat_mask[:, 1:]
    preds = logits[:, :-1]
    if not bool(target_mask.any()):
        raise ValueError("all target positions are masked")
    losses = F.cross_entropy(
        preds.reshape(-1, v), targets.reshape(-1), reduction="none"
    ).view(b, s - 1)
    return losses[target_mask].mean()


def per_token_nll(
    logits: torch.Tensor, tokens: torch.Tensor
) -> torch.Tensor:
    """Negative log-likelihood of each target token: (B, S-1)."""
    b, s, v = logits.shape
    flat_tokens = tokens.reshape(b, -1)
    targets = flat_tokens[:, 1:]
    return F.cross_entropy(
        logits[:, :-1].reshape(-1, v), targets.reshape(-1), reduction="none"
    ).view(b, s - 1)

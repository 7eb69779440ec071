"""Trainable student prompter: conv downsampling, transformer encoder,
query-based decoder, and MLP heads for categories and prompt tokens.

These are the only trainable parameters in the whole system.  The internal
width equals the backend embedding dim, with 8 attention heads, 4x
feed-forward expansion and pre-norm layers.  Spatial positions enter as 2D
sinusoidal encodings added to the reduced feature map; learned positional
content lives only in the query embeddings.
"""

from __future__ import annotations

import logging

import torch
from torch import nn

from .config import Config
from .errors import ShapeMismatch
from .seeds import derive_seed
from .types import FeatureMap, StudentOutput

logger = logging.getLogger(__name__)

NUM_HEADS = 8
FFN_FACTOR = 4


class MLP(nn.Module):
    """Stack of linear layers with ReLU between; a single layer is plain linear."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


def position_encoding_2d(height: int, width: int, dim: int,
                         dtype=torch.float32) -> torch.Tensor:
    """Fixed 2D sinusoidal positions, (height * width, dim); half the dims
    encode the row, half the column."""
    half = dim // 2
    dim_t = torch.arange(half, dtype=dtype)
    dim_t = 10000.0 ** (2 * (dim_t // 2) / half)
    ys = torch.arange(height, dtype=dtype)[:, None] / dim_t  # (H, half)
    xs = torch.arange(width, dtype=dtype)[:, None] / dim_t
    ys = torch.stack([ys[:, 0::2].sin(), ys[:, 1::2].cos()], dim=2).flatten(1)
    xs = torch.stack([xs[:, 0::2].sin(), xs[:, 1::2].cos()], dim=2).flatten(1)
    pos = torch.cat(
        [ys[:, None, :].expand(height, width, half),
         xs[None, :, :].expand(height, width, half)], dim=2)
    return pos.reshape(height * width, dim)


class StudentPrompter(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.conv1 = nn.Conv2d(cfg.embed_dim, d, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(d, d, kernel_size=3, stride=2, padding=1)
        encoder_layer = nn.TransformerEncoderLayer(
            d_model=d, nhead=NUM_HEADS, dim_feedforward=FFN_FACTOR * d,
            dropout=cfg.dropout, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(
            encoder_layer, cfg.encoder_layers, norm=nn.LayerNorm(d),
            enable_nested_tensor=False)
        decoder_layer = nn.TransformerDecoderLayer(
            d_model=d, nhead=NUM_HEADS, dim_feedforward=FFN_FACTOR * d,
            dropout=cfg.dropout, batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(
            decoder_layer, cfg.decoder_layers, norm=nn.LayerNorm(d))
        # small but distinct query init: identical queries leave matching
        # unable to break the symmetry between them
        self.queries = nn.Parameter(0.1 * torch.randn(cfg.num_queries, d))
        self.class_head = MLP(d, d, cfg.num_categories + 1, cfg.cls_head_layers)
        self.prompt_head = MLP(d, d, cfg.token_dim, 3)
        with torch.no_grad():
            # start the geometry dims of every token group at a centered,
            # modest box so early regression sits in the quadratic zone
            bias = self.prompt_head.layers[-1].bias
            for g in range(cfg.tokens_per_part):
                base = g * cfg.embed_dim
                bias[base:base + 2] = 0.0
                bias[base + 2:base + 4] = -1.2
        self.param_count = sum(p.numel() for p in self.parameters())

    def downsample(self, features: FeatureMap) -> torch.Tensor:
        """Two stride-2 convolutions: (h, w, d) -> (h/4, w/4, model_dim)."""
        f = features.features
        if f.ndim != 3 or f.shape[2] != self.cfg.embed_dim:
            raise ShapeMismatch(f"expected (h, w, {self.cfg.embed_dim}) features, "
                                f"got {tuple(f.shape)}")
        if f.shape[0] % 4 != 0 or f.shape[1] % 4 != 0:
            raise ShapeMismatch(f"feature sides must be divisible by 4, got {tuple(f.shape[:2])}")
        out = self._conv(f.permute(2, 0, 1).unsqueeze(0))
        return out.squeeze(0).permute(1, 2, 0)

    def _conv(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(torch.relu(self.conv1(x)))

    def forward_batch(self, features: torch.Tensor,
                      token_order: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Batched forward: (B, h, w, d) -> logits (B, S, C+1), tokens (B, S, K*d).

        token_order optionally permutes the flattened spatial sequence (with
        its positional encodings); outputs are invariant to it.
        """
        if features.ndim != 4 or features.shape[3] != self.cfg.embed_dim:
            raise ShapeMismatch(f"expected (B, h, w, {self.cfg.embed_dim}), "
                                f"got {tuple(features.shape)}")
        if features.shape[1] % 4 != 0 or features.shape[2] % 4 != 0:
            raise ShapeMismatch(f"feature sides must be divisible by 4, got {tuple(features.shape[1:3])}")
        batch = features.shape[0]
        reduced = self._conv(features.permute(0, 3, 1, 2))  # (B, D, h/4, w/4)
        _, d, rh, rw = reduced.shape
        tokens = reduced.flatten(2).transpose(1, 2)  # (B, rh*rw, D)
        pos = position_encoding_2d(rh, rw, d, dtype=tokens.dtype)
        tokens = tokens + pos[None]
        if token_order is not None:
            tokens = tokens[:, token_order, :]
        memory = self.encoder(tokens)
        query = self.queries.unsqueeze(0).expand(batch, -1, -1).to(tokens.dtype)
        decoded = self.decoder(query, memory)
        return self.class_head(decoded), self.prompt_head(decoded)

    def forward(self, features: FeatureMap,
                token_order: torch.Tensor | None = None) -> StudentOutput:
        logits, tokens = self.forward_batch(features.features.unsqueeze(0), token_order)
        return StudentOutput(class_logits=logits.squeeze(0), prompt_tokens=tokens.squeeze(0))

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named top-level groups, used to verify gradients reach everything."""
        return {
            "conv": list(self.conv1.parameters()) + list(self.conv2.parameters()),
            "encoder": list(self.encoder.parameters()),
            "decoder": list(self.decoder.parameters()),
            "queries": [self.queries],
            "class_head": list(self.class_head.parameters()),
            "prompt_head": list(self.prompt_head.parameters()),
        }


def init_prompter(cfg: Config, seed: int | None = None) -> StudentPrompter:
    """Reproducibly initialized prompter; same seed gives bitwise-equal params."""
    if seed is None:
        seed = cfg.seed
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "prompter"))
        model = StudentPrompter(cfg)
    logger.info("initialized student prompter: %d parameters", model.param_count)
    return model

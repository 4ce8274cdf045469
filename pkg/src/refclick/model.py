"""Target-branch network: patch embeddings, prompt fusion, transformer
backbone, and a simple feature-pyramid decoder.

The default configuration is desk-scale: the same topology as a ViT-B
pipeline but small enough to train on CPU in minutes. Scaling up is a
config change, not a code change.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import clicks as clicks_mod
from . import maskops

CHECKPOINT_FORMAT = "refclick-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 224
    patch_size: int = 16
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    decoder_dim: int = 48

    def __post_init__(self):
        if self.input_size % self.patch_size != 0:
            raise ValueError("input_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size * self.grid_size


class Block(nn.Module):
    """Pre-norm transformer block: LN->MHA->residual, LN->MLP->residual."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


class PyramidDecoder(nn.Module):
    """Simple feature pyramid over the final token grid plus a mask head.

    Branches at 1/16, 1/8, and 1/4 scale are fused at 1/4 and upsampled
    to full resolution; the head emits a single logit per pixel.
    """

    def __init__(self, embed_dim: int, decoder_dim: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.up8 = nn.ConvTranspose2d(embed_dim, embed_dim, kernel_size=2, stride=2)
        self.up4 = nn.Sequential(
            nn.ConvTranspose2d(embed_dim, embed_dim, kernel_size=2, stride=2),
            nn.GELU(),
            nn.ConvTranspose2d(embed_dim, embed_dim, kernel_size=2, stride=2),
        )
        self.proj = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(embed_dim, decoder_dim, kernel_size=1),
                nn.GroupNorm(1, decoder_dim),
                nn.GELU(),
            )
            for _ in range(3)
        )
        self.fuse = nn.Sequential(
            nn.Conv2d(decoder_dim, decoder_dim, kernel_size=3, padding=1),
            nn.GroupNorm(1, decoder_dim),
            nn.GELU(),
        )
        self.head = nn.Conv2d(decoder_dim, 1, kernel_size=1)

    def forward(self, grid):
        # grid: (B, C, H', W')
        levels = [grid, self.up8(grid), self.up4(grid)]
        target = levels[-1].shape[-2:]
        fused = None
        for proj, feat in zip(self.proj, levels):
            x = proj(feat)
            if x.shape[-2:] != target:
                x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
            fused = x if fused is None else fused + x
        x = self.fuse(fused)
        x = F.interpolate(x, scale_factor=4, mode="bilinear", align_corners=False)
        return self.head(x)


class SegModel(nn.Module):
    """Interactive segmentation model with additive reference prompts.

    The embedded image and extra-map tokens are summed with broadcast
    positive/negative prompt vectors, run through the shared transformer
    backbone, and decoded to a per-pixel probability map.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Conv2d(3, c.embed_dim, kernel_size=c.patch_size, stride=c.patch_size)
        self.extra_embed = nn.Conv2d(3, c.embed_dim, kernel_size=c.patch_size, stride=c.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, c.num_tokens, c.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(Block(c.embed_dim, c.num_heads, c.mlp_ratio) for _ in range(c.depth))
        self.encoder_norm = nn.LayerNorm(c.embed_dim)
        self.decoder = PyramidDecoder(c.embed_dim, c.decoder_dim, c.patch_size)
        self.prompt_mlp_pos = nn.Sequential(
            nn.Linear(c.embed_dim, c.embed_dim), nn.GELU(), nn.Linear(c.embed_dim, c.embed_dim)
        )
        self.prompt_mlp_neg = nn.Sequential(
            nn.Linear(c.embed_dim, c.embed_dim), nn.GELU(), nn.Linear(c.embed_dim, c.embed_dim)
        )

    # -- target branch ----------------------------------------------------

    def _check_input(self, x, channels: int, what: str):
        size = self.config.input_size
        if x.dim() != 4 or x.shape[1] != channels or x.shape[-2:] != (size, size):
            raise ValueError(f"{what} must have shape (B, {channels}, {size}, {size}), got {tuple(x.shape)}")

    def embed_image(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, L, C) tokens with positional encoding."""
        self._check_input(image, 3, "image")
        x = self.patch_embed(image).flatten(2).transpose(1, 2)
        return x + self.pos_embed

    def embed_extras(self, extra: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) click/previous-mask channels -> (B, L, C) tokens."""
        self._check_input(extra, 3, "extra maps")
        return self.extra_embed(extra).flatten(2).transpose(1, 2)

    @staticmethod
    def fuse(
        img_tokens: torch.Tensor,
        extra_tokens: torch.Tensor,
        p_pos: Optional[torch.Tensor] = None,
        p_neg: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Per-token sum of both embeddings plus broadcast prompt vectors.

        A ``None`` or all-zero prompt is skipped, so the no-guidance and
        empty-guidance paths produce bit-identical activations.
        """
        if img_tokens.shape != extra_tokens.shape:
            raise ValueError(f"token shapes differ: {tuple(img_tokens.shape)} vs {tuple(extra_tokens.shape)}")
        x = img_tokens + extra_tokens
        for p in (p_pos, p_neg):
            if p is None:
                continue
            if p.shape[-1] != x.shape[-1]:
                raise ValueError(f"prompt length {p.shape[-1]} != embed dim {x.shape[-1]}")
            if p.any():
                x = x + p.reshape(-1, 1, p.shape[-1])
        return x

    def backbone(self, tokens: torch.Tensor) -> torch.Tensor:
        """Transformer blocks over the residual stream (final norm excluded;
        consumers apply :attr:`encoder_norm`)."""
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def tokens_to_grid(self, tokens: torch.Tensor) -> torch.Tensor:
        g = self.config.grid_size
        b, l, c = tokens.shape
        if l != g * g:
            raise ValueError(f"expected {g * g} tokens, got {l}")
        return tokens.transpose(1, 2).reshape(b, c, g, g)

    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        """Backbone tokens -> (B, 1, H, W) probabilities."""
        grid = self.tokens_to_grid(self.encoder_norm(tokens))
        return torch.sigmoid(self.decoder(grid))

    def decode_logits(self, tokens: torch.Tensor) -> torch.Tensor:
        grid = self.tokens_to_grid(self.encoder_norm(tokens))
        return self.decoder(grid)

    def forward(
        self,
        image: torch.Tensor,
        extras: torch.Tensor,
        p_pos: Optional[torch.Tensor] = None,
        p_neg: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        fused = self.fuse(self.embed_image(image), self.embed_extras(extras), p_pos, p_neg)
        return self.decode(self.backbone(fused))

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named parameter groups, mainly for gradient-coverage checks."""
        return {
            "backbone": [self.pos_embed, *self.blocks.parameters(), *self.encoder_norm.parameters()],
            "image_embed": list(self.patch_embed.parameters()),
            "extra_embed": list(self.extra_embed.parameters()),
            "decoder": list(self.decoder.parameters()),
            "prompt_mlp_pos": list(self.prompt_mlp_pos.parameters()),
            "prompt_mlp_neg": list(self.prompt_mlp_neg.parameters()),
        }


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """HxWx3 uint8 -> (1, 3, H, W) tensor normalized to [-1, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 RGB image, got shape {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
    return ((t / 255.0 - 0.5) / 0.5).permute(2, 0, 1).unsqueeze(0)


def predict(
    model: SegModel,
    image: np.ndarray,
    clicks: Sequence[clicks_mod.Click],
    prev: Optional[np.ndarray] = None,
    guidance=None,
    prompts: Optional[tuple] = None,
    radius: int = clicks_mod.DISK_RADIUS,
) -> np.ndarray:
    """One interaction round: returns the HxW probability map.

    ``prompts`` (as produced by :func:`refclick.prompts.generate_prompts`)
    takes precedence over ``guidance``; passing neither runs the plain
    no-reference forward. ``prev`` defaults to all zeros for the first round.
    """
    from . import prompts as prompts_mod  # local import to keep module deps acyclic

    size = model.config.input_size
    if prev is None:
        prev = np.zeros((size, size), dtype=np.float32)
    extras = clicks_mod.assemble_extra_maps(clicks, prev, radius)
    dtype = next(model.parameters()).dtype
    img_t = image_to_tensor(image, dtype)
    extras_t = torch.from_numpy(extras).to(dtype).unsqueeze(0)
    with torch.no_grad():
        if prompts is None and guidance is not None:
            prompts = prompts_mod.generate_prompts(model, guidance)
        p_pos, p_neg = prompts if prompts is not None else (None, None)
        probs = model(img_t, extras_t, p_pos, p_neg)
    return probs[0, 0].numpy().astype(np.float32)


def save_checkpoint(model: SegModel, path, meta: Optional[dict] = None) -> None:
    """Single-archive checkpoint: config as JSON plus named weight arrays."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config_json": json.dumps(asdict(model.config), sort_keys=True),
        "state_dict": model.state_dict(),
        "meta": dict(meta or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> SegModel:
    """Load and validate a checkpoint; fails loudly on config/weight mismatch."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    config = ModelConfig(**json.loads(payload["config_json"]))
    model = SegModel(config)
    model.load_state_dict(payload["state_dict"], strict=True)
    model.eval()
    return model


def checkpoint_bytes(model: SegModel, meta: Optional[dict] = None) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(model, buf, meta)
    return buf.getvalue()


def resize_pos_embed(model: SegModel, new_input_size: int) -> SegModel:
    """Rebuild the model at a new input size, bicubically resampling the
    learned positional grid. All other weights carry over unchanged."""
    old = model.config
    new_cfg = ModelConfig(**{**asdict(old), "input_size": new_input_size})
    new_model = SegModel(new_cfg)
    state = model.state_dict()
    g_old, g_new = old.grid_size, new_cfg.grid_size
    pe = state["pos_embed"].reshape(1, g_old, g_old, old.embed_dim).permute(0, 3, 1, 2)
    pe = F.interpolate(pe, size=(g_new, g_new), mode="bicubic", align_corners=False)
    state["pos_embed"] = pe.permute(0, 2, 3, 1).reshape(1, g_new * g_new, old.embed_dim)
    new_model.load_state_dict(state, strict=True)
    return new_model

"""
Velocity network: a small diffusion transformer with Kalman DiT blocks.

Each Kalman block runs a predict step (camera-driven residual from a
cross-attention between camera tokens and the projected-prior tokens) and an
update step (a learned correction from the discrepancy between the prediction
and the prior). All new branches end in zero-initialized linear layers, so a
freshly built Kalman block is exactly the identity.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
from einops import rearrange

from app.models.config import AblationFlags, ModelConfig
from app.services.conditioning import SceneConditioning
from app.services.exceptions import InvalidInputError, NonFiniteInputError

logger = logging.getLogger(__name__)

TIMESTEP_SCALE = 1000.0
POS_EMBED_STD = 0.02


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def zero_linear(dim_in: int, dim_out: int) -> nn.Linear:
    """Linear layer with weights and bias initialized to zero."""
    layer = nn.Linear(dim_in, dim_out)
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    layer.is_zero_init = True
    return layer


# ===== Embeddings =====

class TimestepEmbedder(nn.Module):
    """Embeds scalar flow times t in [0, 1] into vectors."""

    def __init__(self, hidden_size: int, frequency_embedding_size: int = 64):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(frequency_embedding_size, hidden_size),
            nn.SiLU(),
            nn.Linear(hidden_size, hidden_size),
        )
        self.frequency_embedding_size = frequency_embedding_size

    @staticmethod
    def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
        """Sinusoidal embedding, computed in the dtype of t."""
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
        args = (t * TIMESTEP_SCALE)[:, None] * freqs[None]
        embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        if dim % 2:
            embedding = torch.cat([embedding, torch.zeros_like(embedding[:, :1])], dim=-1)
        return embedding

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.timestep_embedding(t, self.frequency_embedding_size))


class PatchEmbed(nn.Module):
    """Linear embedding of non-overlapping patches of a B x T x C x H x W video."""

    def __init__(self, in_channels: int, patch: int, hidden_size: int):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(in_channels * patch * patch, hidden_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        patches = rearrange(x, "b t c (h p1) (w p2) -> b (t h w) (c p1 p2)", p1=self.patch, p2=self.patch)
        return self.proj(patches)


class FactorizedPosEmbed(nn.Module):
    """
    Learned positional embedding summed from frame, row and column tables.
    The owning network fills the tables in initialize_weights.
    """

    def __init__(self, grid: Tuple[int, int, int], hidden_size: int):
        super().__init__()
        frames, rows, cols = grid
        self.frame = nn.Parameter(torch.zeros(frames, hidden_size))
        self.row = nn.Parameter(torch.zeros(rows, hidden_size))
        self.col = nn.Parameter(torch.zeros(cols, hidden_size))

    def forward(self) -> torch.Tensor:
        table = self.frame[:, None, None] + self.row[None, :, None] + self.col[None, None, :]
        return rearrange(table, "t h w d -> (t h w) d")


# ===== Attention and blocks =====

class Attention(nn.Module):
    """Multi-head self-attention without positional terms (permutation equivariant)."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = rearrange(self.qkv(x), "b n (three h d) -> three b h n d", three=3, h=self.num_heads)
        weights = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        return self.proj(rearrange(weights @ v, "b h n d -> b n (h d)"))


class CrossAttention(nn.Module):
    """Multi-head attention with queries from one token stream and keys/values from another."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        q = rearrange(self.q(x), "b n (h d) -> b h n d", h=self.num_heads)
        k, v = rearrange(self.kv(context), "b n (two h d) -> two b h n d", two=2, h=self.num_heads)
        weights = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        return self.proj(rearrange(weights @ v, "b h n d -> b n (h d)"))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU(approximate="tanh")
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class DiTBlock(nn.Module):
    """
    Transformer block with adaLN-Zero conditioning on the timestep embedding.

    The modulation layer is zero-initialized, so both residual gates start at
    zero and the block is the identity.
    """

    def __init__(self, hidden_size: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden_size, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(hidden_size, num_heads)
        self.norm2 = nn.LayerNorm(hidden_size, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(hidden_size, int(hidden_size * mlp_ratio))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), zero_linear(hidden_size, 6 * hidden_size))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(c).chunk(6, dim=1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa))
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


class FinalLayer(nn.Module):
    """adaLN output head mapping tokens back to latent patches; zero-initialized."""

    def __init__(self, hidden_size: int, out_features: int):
        super().__init__()
        self.norm_final = nn.LayerNorm(hidden_size, elementwise_affine=False, eps=1e-6)
        self.linear = zero_linear(hidden_size, out_features)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), zero_linear(hidden_size, 2 * hidden_size))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm_final(x), shift, scale))


# ===== Kalman DiT block =====

@dataclass
class KalmanBlockState:
    """Token streams seen by a Kalman block: video z, projected prior z_pc and camera tokens."""

    z: torch.Tensor
    z_pc: torch.Tensor
    cam: torch.Tensor

    def __post_init__(self):
        shapes = {self.z.shape, self.z_pc.shape, self.cam.shape}
        if len(shapes) != 1:
            raise InvalidInputError(
                f"Token streams disagree: z {tuple(self.z.shape)}, z_pc {tuple(self.z_pc.shape)}, "
                f"cam {tuple(self.cam.shape)}",
                field="tokens",
            )


class KalmanDiTBlock(nn.Module):
    """
    Predict then update, followed by one step of the prior stream.

    Args:
        config: Model configuration
        flags: Ablation flags; use_update=False removes the update submodule and
            control_mode selects how the control input is formed
        step_prior: Whether this block advances the prior stream (False for the last block)
    """

    def __init__(self, config: ModelConfig, flags: AblationFlags, step_prior: bool = True):
        super().__init__()
        dim, heads = config.embed_dim, config.num_heads
        self.control_mode = flags.control_mode
        self.query_source = config.control_query_source

        if self.control_mode == "cross_attention":
            self.query_norm = nn.LayerNorm(dim, eps=1e-6)
            self.context_norm = nn.LayerNorm(dim, eps=1e-6)
            self.control_attn = CrossAttention(dim, heads)
        elif self.control_mode == "camera_only":
            self.query_norm = nn.LayerNorm(dim, eps=1e-6)
            self.control_attn = Attention(dim, heads)
        self.predict_out = zero_linear(dim, dim)

        self.use_update = flags.use_update
        if self.use_update:
            self.diff_blocks = nn.ModuleList([
                DiTBlock(dim, heads, config.mlp_ratio) for _ in range(config.diff_blocks_per_update)
            ])
            self.update_out = zero_linear(dim, dim)

        self.prior_step = DiTBlock(dim, heads, config.mlp_ratio) if step_prior else None

    def control_input(self, z_pc: torch.Tensor, cam: torch.Tensor) -> torch.Tensor:
        """Control input u for this block from camera tokens and the prior stream."""
        if self.control_mode == "additive":
            return cam + z_pc
        if self.control_mode == "camera_only":
            return self.control_attn(self.query_norm(cam))
        if self.query_source == "camera":
            query, context = cam, z_pc
        else:
            query, context = z_pc, cam
        return self.control_attn(self.query_norm(query), self.context_norm(context))

    def kalman_predict(self, state: KalmanBlockState) -> torch.Tensor:
        """z_pred = z + zero_linear(u)."""
        return state.z + self.predict_out(self.control_input(state.z_pc, state.cam))

    def kalman_update(self, z_pred: torch.Tensor, z_pc: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """z_update = z_pred + zero_linear(Diff(z_pred - z_pc)); identity when the update is ablated."""
        if not self.use_update:
            return z_pred
        if z_pred.shape != z_pc.shape:
            raise InvalidInputError(
                f"Prediction {tuple(z_pred.shape)} and prior {tuple(z_pc.shape)} token shapes differ",
                field="z_pc",
            )
        z_diff = z_pred - z_pc
        for block in self.diff_blocks:
            z_diff = block(z_diff, c)
        return z_pred + self.update_out(z_diff)

    def pc_stream_step(self, z_pc: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if self.prior_step is None:
            return z_pc
        return self.prior_step(z_pc, c)

    def forward(self, state: KalmanBlockState, c: torch.Tensor) -> KalmanBlockState:
        z_pred = self.kalman_predict(state)
        z_update = self.kalman_update(z_pred, state.z_pc, c)
        return KalmanBlockState(z=z_update, z_pc=self.pc_stream_step(state.z_pc, c), cam=state.cam)


# ===== Velocity network =====

@dataclass
class ConditioningTokens:
    """Embedded conditioning: camera tokens, prior tokens and the endpoint channels of the video input."""

    cam: torch.Tensor
    z_pc: torch.Tensor
    endpoint_channels: torch.Tensor


class VelocityNetwork(nn.Module):
    """
    Diffusion transformer predicting the rectified-flow velocity of a latent video.

    Kalman blocks run after the backbone blocks listed in
    config.kalman_insertion_indices (1-based).
    """

    def __init__(
        self,
        config: ModelConfig,
        flags: Optional[AblationFlags] = None,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.config = config
        self.flags = flags or AblationFlags()
        dim = config.embed_dim
        channels = config.latent_channels
        grid = config.token_grid

        self.x_embedder = PatchEmbed(2 * channels + 1, config.token_patch, dim)
        self.cam_embedder = PatchEmbed(6, config.patch_size * config.token_patch, dim)
        self.pc_embedder = PatchEmbed(channels, config.token_patch, dim)
        self.pos_embed = FactorizedPosEmbed(grid, dim)
        self.pc_pos_embed = FactorizedPosEmbed(grid, dim)
        self.t_embedder = TimestepEmbedder(dim)

        self.blocks = nn.ModuleList([
            DiTBlock(dim, config.num_heads, config.mlp_ratio) for _ in range(config.num_backbone_blocks)
        ])
        indices = config.kalman_insertion_indices or []
        self.kalman_after = {index: k for k, index in enumerate(indices)}
        self.kalman_blocks = nn.ModuleList([
            KalmanDiTBlock(config, self.flags, step_prior=k < len(indices) - 1)
            for k in range(len(indices))
        ])
        self.final_layer = FinalLayer(dim, channels * config.token_patch ** 2)
        self.initialize_weights(generator)

    def initialize_weights(self, generator: Optional[torch.Generator] = None) -> None:
        """
        Xavier-uniform linears with zero bias (except the zero-initialized layers)
        and normal positional tables, all drawn from generator when given.
        """

        def _basic_init(module):
            if isinstance(module, nn.Linear) and not getattr(module, "is_zero_init", False):
                nn.init.xavier_uniform_(module.weight, generator=generator)
                nn.init.zeros_(module.bias)
            elif isinstance(module, FactorizedPosEmbed):
                for table in (module.frame, module.row, module.col):
                    nn.init.normal_(table, std=POS_EMBED_STD, generator=generator)

        self.apply(_basic_init)
        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02, generator=generator)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02, generator=generator)

    def _check_conditioning(self, cond: SceneConditioning) -> None:
        cfg = self.config
        latent = (cfg.num_frames, cfg.latent_channels, cfg.latent_height, cfg.latent_width)
        expected = {
            "z_pc": latent,
            "endpoint_latents": latent,
            "confidence": (cfg.num_frames, 1, cfg.latent_height, cfg.latent_width),
            "plucker": (cfg.num_frames, 6, cfg.image_height, cfg.image_width),
            "endpoint_mask": (cfg.num_frames,),
        }
        for name, shape in expected.items():
            actual = tuple(getattr(cond, name).shape[1:])
            if actual != shape:
                raise InvalidInputError(
                    f"Conditioning '{name}' has shape {actual}, expected {shape}", field=name
                )

    def embed_conditioning(self, cond: SceneConditioning) -> ConditioningTokens:
        """
        Embed a batched conditioning.

        Camera tokens are a patch embedding of the Plücker images (no positional
        term); prior tokens embed the projected-prior latent plus positions; the
        endpoint channels are the endpoint latents followed by the indicator mask.

        Raises:
            InvalidInputError: Shapes disagree with the model configuration
        """
        if not cond.is_batched:
            raise InvalidInputError("Conditioning must be batched", field="conditioning")
        self._check_conditioning(cond)
        b, t, _, h, w = cond.endpoint_latents.shape
        mask = cond.endpoint_mask.to(cond.endpoint_latents.dtype).view(b, t, 1, 1, 1).expand(b, t, 1, h, w)
        return ConditioningTokens(
            cam=self.cam_embedder(cond.plucker),
            z_pc=self.pc_embedder(cond.z_pc) + self.pc_pos_embed(),
            endpoint_channels=torch.cat([cond.endpoint_latents, mask], dim=2),
        )

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        _, rows, cols = self.config.token_grid
        p = self.config.token_patch
        return rearrange(
            tokens, "b (t h w) (c p1 p2) -> b t c (h p1) (w p2)", h=rows, w=cols, p1=p, p2=p
        )

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: SceneConditioning) -> torch.Tensor:
        """
        Predict the velocity field.

        Args:
            z_t: B x T x C x H' x W' noisy latent
            t: B flow times in [0, 1]
            cond: Batched conditioning

        Returns:
            B x T x C x H' x W' velocity

        Raises:
            NonFiniteInputError: z_t or t contains NaN/inf
            InvalidInputError: t outside [0, 1] or shape mismatch
        """
        if not torch.isfinite(z_t).all() or not torch.isfinite(t).all():
            raise NonFiniteInputError("Velocity network received non-finite inputs", field="z_t")
        if ((t < 0) | (t > 1)).any():
            raise InvalidInputError("Flow time must lie in [0, 1]", field="t")
        if z_t.shape != cond.endpoint_latents.shape:
            raise InvalidInputError(
                f"Latent {tuple(z_t.shape)} does not match conditioning {tuple(cond.endpoint_latents.shape)}",
                field="z_t",
            )

        tokens = self.embed_conditioning(cond)
        x = self.x_embedder(torch.cat([z_t, tokens.endpoint_channels], dim=2)) + self.pos_embed()
        c = self.t_embedder(t)
        z_pc = tokens.z_pc

        for index, block in enumerate(self.blocks, start=1):
            x = block(x, c)
            k = self.kalman_after.get(index)
            if k is not None:
                state = self.kalman_blocks[k](KalmanBlockState(z=x, z_pc=z_pc, cam=tokens.cam), c)
                x, z_pc = state.z, state.z_pc

        return self.unpatchify(self.final_layer(x, c))


def build_model(config: ModelConfig, flags: Optional[AblationFlags] = None, seed: int = 0) -> VelocityNetwork:
    """
    Construct a velocity network whose weights depend only on seed.

    Initialization draws from a private generator; the global torch RNG is
    left where it was.
    """
    generator = torch.Generator().manual_seed(seed % 2**63)
    with torch.random.fork_rng(devices=[]):
        model = VelocityNetwork(config, flags, generator)
    logger.debug(f"Built velocity network with {count_parameters(model)} parameters (flags: {model.flags.model_dump()})")
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def zero_init_parameter_names(model: nn.Module) -> List[str]:
    """Names of the weights of every zero-initialized linear layer."""
    return [
        f"{name}.weight" for name, module in model.named_modules()
        if getattr(module, "is_zero_init", False)
    ]

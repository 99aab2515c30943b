"""
Configuration models for scene generation, the velocity network, flow training
and ablation runs.
"""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


VariantTag = Literal["full", "a", "b", "c", "d", "e", "f", "g", "h"]
ControlMode = Literal["cross_attention", "camera_only", "additive"]


class SceneSpec(BaseModel):
    """Parameters of one synthetic multi-view scene."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0, lt=2**64, description="64-bit scene seed")
    num_points: int = Field(4096, ge=1, description="Number of scene points")
    resolution: Tuple[int, int] = Field((32, 32), description="(H, W) in pixels")
    num_frames: int = Field(9, description="Frames per trajectory (odd, >= 3)")
    depth_noise_sigma: float = Field(0.05, ge=0.0, description="Std of along-ray noise (world units)")
    conf_sharpness: float = Field(1.0, gt=0.0, description="Confidence decay rate")
    trajectory_spread: float = Field(0.8, ge=0.0, le=3.0, description="Max endpoint rotation (radians)")
    camera_distance: float = Field(3.0, gt=0.5, description="Distance from cameras to the scene centroid")
    focal_scale: float = Field(1.0, gt=0.0, description="Focal length as a multiple of image width")

    @field_validator("resolution")
    @classmethod
    def validate_resolution(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        """Ensure both image sides are at least 8 pixels."""
        if min(v) < 8:
            raise ValueError(f"Resolution must be at least 8x8, got {v[0]}x{v[1]}")
        return v

    @field_validator("num_frames")
    @classmethod
    def validate_num_frames(cls, v: int) -> int:
        """Ensure an odd frame count so a middle frame exists."""
        if v < 3 or v % 2 == 0:
            raise ValueError(f"num_frames must be odd and >= 3, got {v}")
        return v

    @property
    def height(self) -> int:
        return self.resolution[0]

    @property
    def width(self) -> int:
        return self.resolution[1]


class ModelConfig(BaseModel):
    """Shape and depth of the velocity network."""

    model_config = ConfigDict(extra="forbid")

    embed_dim: int = Field(64, ge=4)
    num_heads: int = Field(4, ge=1)
    num_backbone_blocks: int = Field(6, ge=1)
    num_kalman_blocks: int = Field(2, ge=0)
    kalman_insertion_indices: Optional[List[int]] = Field(
        None, description="Backbone block indices (1-based) after which a Kalman block runs"
    )
    diff_blocks_per_update: int = Field(1, ge=1)
    mlp_ratio: float = Field(4.0, gt=0.0)
    patch_size: int = Field(2, ge=1, description="Codec patch size p")
    token_patch: int = Field(2, ge=1, description="Latent patch size per token")
    num_frames: int = Field(9, ge=2)
    image_height: int = Field(32, ge=1)
    image_width: int = Field(32, ge=1)
    latent_channels: int = Field(12, ge=1)
    control_query_source: Literal["camera", "projection"] = "camera"

    @model_validator(mode="after")
    def resolve_and_check(self) -> "ModelConfig":
        """Fill default insertion indices and check shape arithmetic."""
        n, k = self.num_backbone_blocks, self.num_kalman_blocks
        if k > n:
            raise ValueError(f"num_kalman_blocks ({k}) exceeds num_backbone_blocks ({n})")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.latent_channels != 3 * self.patch_size ** 2:
            raise ValueError(
                f"latent_channels must be 3*p^2 = {3 * self.patch_size ** 2}, got {self.latent_channels}"
            )
        step = self.patch_size * self.token_patch
        if self.image_height % step or self.image_width % step:
            raise ValueError(
                f"Image size {self.image_height}x{self.image_width} not divisible by "
                f"patch_size*token_patch = {step}"
            )

        if self.kalman_insertion_indices is None:
            self.kalman_insertion_indices = [(n * j) // k for j in range(1, k + 1)]
        indices = self.kalman_insertion_indices
        if len(indices) != k:
            raise ValueError(f"Expected {k} insertion indices, got {len(indices)}")
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError(f"Insertion indices must be strictly increasing: {indices}")
        if indices and (indices[0] < 1 or indices[-1] > n):
            raise ValueError(f"Insertion indices must lie in [1, {n}]: {indices}")
        return self

    @property
    def latent_height(self) -> int:
        return self.image_height // self.patch_size

    @property
    def latent_width(self) -> int:
        return self.image_width // self.patch_size

    @property
    def token_grid(self) -> Tuple[int, int, int]:
        """(frames, rows, cols) of the shared token grid."""
        return (
            self.num_frames,
            self.latent_height // self.token_patch,
            self.latent_width // self.token_patch,
        )

    @property
    def num_tokens(self) -> int:
        t, h, w = self.token_grid
        return t * h * w


class FlowConfig(BaseModel):
    """Rectified-flow objective, optimizer and sampler settings."""

    model_config = ConfigDict(extra="forbid")

    lambda1: float = Field(1.0, ge=0.0, description="Weight of the confidence-weighted prior")
    lambda2: float = Field(1.0, ge=0.0, description="Weight of the Gaussian noise")
    lambda_grad: float = Field(0.05, ge=0.0, description="Weight of the latent gradient loss")
    renormalize_init: bool = Field(False, description="Rescale z_0 to unit variance per element")
    sample_steps: int = Field(50, ge=1)
    learning_rate: float = Field(1e-4, ge=0.0)
    train_steps: int = Field(3000, ge=0)
    batch_size: int = Field(4, ge=1)
    save_every: int = Field(500, ge=1)
    seed: int = Field(0, ge=0)


class AblationFlags(BaseModel):
    """Switches toggled by the ablation variants. Defaults are the full model."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    noise_init: bool = True
    use_confidence: bool = True
    use_update: bool = True
    grad_loss: bool = True
    control_mode: ControlMode = "cross_attention"
    last_frame_conditioning: bool = True


VARIANT_FLAGS: Dict[str, AblationFlags] = {
    "full": AblationFlags(),
    "a": AblationFlags(noise_init=False),
    "b": AblationFlags(use_confidence=False),
    "c": AblationFlags(use_update=False),
    "d": AblationFlags(use_update=False, noise_init=False),
    "e": AblationFlags(grad_loss=False),
    "f": AblationFlags(control_mode="camera_only"),
    "g": AblationFlags(control_mode="additive"),
    "h": AblationFlags(last_frame_conditioning=False),
}

VARIANT_DESCRIPTIONS: Dict[str, str] = {
    "full": "full model",
    "a": "w/o noise init",
    "b": "w/o confidence",
    "c": "w/o update",
    "d": "w/o update and noise init",
    "e": "w/o gradient loss",
    "f": "camera pose only",
    "g": "camera pose + projection (additive)",
    "h": "first-frame conditioning only",
}


def effective_flow_config(cfg: FlowConfig, flags: AblationFlags) -> FlowConfig:
    """
    Apply the objective-level ablation flags to a flow config.

    Args:
        cfg: Configured flow settings
        flags: Ablation flags of the run

    Returns:
        Copy of cfg with lambda1 zeroed when noise init is off and
        lambda_grad zeroed when the gradient loss is off
    """
    updates = {}
    if not flags.noise_init:
        updates["lambda1"] = 0.0
    if not flags.grad_loss:
        updates["lambda_grad"] = 0.0
    return cfg.model_copy(update=updates)


class RunPaths(BaseModel):
    """Filesystem locations of a run."""

    model_config = ConfigDict(extra="forbid")

    data_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    report_dir: Optional[str] = None


class RunConfig(BaseModel):
    """Complete, self-describing configuration of one pipeline run."""

    model_config = ConfigDict(extra="forbid")

    scene: SceneSpec = Field(default_factory=SceneSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    variant: VariantTag = "full"
    paths: RunPaths = Field(default_factory=RunPaths)

    @model_validator(mode="before")
    @classmethod
    def derive_model_shape(cls, data):
        """Take frame count and resolution for the model from the scene spec unless given."""
        if not isinstance(data, dict):
            return data
        scene = data.get("scene") or {}
        if isinstance(scene, SceneSpec):
            scene = scene.model_dump()
        model = data.get("model") or {}
        if isinstance(model, ModelConfig):
            return data
        model = dict(model)
        resolution = scene.get("resolution", SceneSpec.model_fields["resolution"].default)
        model.setdefault("num_frames", scene.get("num_frames", SceneSpec.model_fields["num_frames"].default))
        model.setdefault("image_height", resolution[0])
        model.setdefault("image_width", resolution[1])
        return {**data, "model": model}

    @model_validator(mode="after")
    def check_shapes(self) -> "RunConfig":
        """Model shape must agree with the scenes it is trained on."""
        if (self.model.num_frames, self.model.image_height, self.model.image_width) != (
            self.scene.num_frames, self.scene.height, self.scene.width
        ):
            raise ValueError(
                f"Model shape (T={self.model.num_frames}, {self.model.image_height}x"
                f"{self.model.image_width}) does not match scene shape "
                f"(T={self.scene.num_frames}, {self.scene.height}x{self.scene.width})"
            )
        return self

    @property
    def flags(self) -> AblationFlags:
        return VARIANT_FLAGS[self.variant]

    def resolved_dump(self) -> dict:
        """Config plus the derived ablation flags, as written next to outputs."""
        data = self.model_dump(mode="json")
        data["flags"] = self.flags.model_dump(mode="json")
        return data

"""
Data models for training logs, evaluation reports and ablation tables.
"""

from typing import List, Optional
from pydantic import BaseModel, Field


PSNR_CAP_DB = 99.0


class TrainLogRecord(BaseModel):
    """One line of train_log.jsonl."""

    step: int = Field(..., ge=0)
    rf_loss: float
    grad_loss: float
    total: float
    wall_ms: float = Field(..., ge=0.0)


class FramePoseError(BaseModel):
    """Pose recovery outcome and error for one generated frame."""

    frame: int = Field(..., ge=0)
    translation_error: float = Field(..., ge=0.0, description="World units")
    rotation_error: float = Field(..., ge=0.0, description="Radians")
    residual: float = Field(..., ge=0.0, description="Photometric MSE of the fitted pose")
    reliable: bool = Field(..., description="False when the residual exceeds the threshold")


class EvalReport(BaseModel):
    """Reconstruction and camera-control metrics for one generated video."""

    scene_id: Optional[str] = None
    psnr_per_frame: List[float] = Field(default_factory=list)
    psnr_mean: float = Field(..., ge=0.0, le=PSNR_CAP_DB)
    psnr_intermediate_mean: float = Field(..., ge=0.0, le=PSNR_CAP_DB,
                                          description="Mean PSNR excluding the endpoint frames")
    ssim_per_frame: List[float] = Field(default_factory=list)
    ssim_mean: float = Field(..., ge=-1.0, le=1.0)
    translation_error: float = Field(..., ge=0.0, description="E_t, world units")
    rotation_error: float = Field(..., ge=0.0, description="E_r, radians")
    per_frame_pose_errors: List[FramePoseError] = Field(default_factory=list)
    unreliable_frames: List[int] = Field(default_factory=list)


class SceneFailure(BaseModel):
    """A scene that could not be evaluated."""

    scene_id: str
    code: str
    message: str


class AggregateReport(BaseModel):
    """Per-scene reports plus their means. Means are None when no scene succeeded."""

    scenes: List[EvalReport] = Field(default_factory=list)
    failures: List[SceneFailure] = Field(default_factory=list)
    num_scenes: int = 0
    psnr_mean: Optional[float] = None
    psnr_intermediate_mean: Optional[float] = None
    ssim_mean: Optional[float] = None
    translation_error: Optional[float] = None
    rotation_error: Optional[float] = None


class SeedResult(BaseModel):
    """Aggregate metrics of one variant trained with one seed."""

    seed: int
    psnr: float
    ssim: float
    translation_error: float
    rotation_error: float


class AblationRow(BaseModel):
    """One row of the ablation table: mean and standard deviation over seeds."""

    variant: str
    description: str
    sigma: Optional[float] = None
    seeds: List[SeedResult] = Field(default_factory=list)
    psnr_mean: Optional[float] = None
    psnr_std: Optional[float] = None
    ssim_mean: Optional[float] = None
    ssim_std: Optional[float] = None
    translation_error_mean: Optional[float] = None
    translation_error_std: Optional[float] = None
    rotation_error_mean: Optional[float] = None
    rotation_error_std: Optional[float] = None
    error: Optional[str] = None


class AblationTable(BaseModel):
    """Result of the ablate command."""

    rows: List[AblationRow] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=list)
    train_steps: int = 0

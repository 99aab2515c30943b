"""
Rectified-flow objective, training loop and Euler sampler with
confidence-aware initialization.

The source sample is z_0 = lambda1 * (w * z_pc) + lambda2 * eps: the
projected prior weighted by its frame-wise confidence, plus Gaussian noise.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Iterator, List, NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from app.models.config import AblationFlags, FlowConfig, effective_flow_config
from app.services.conditioning import SceneConditioning, select, stack_conditioning
from app.services.exceptions import InvalidInputError, NumericalFailureError
from app.services.scenegen import derive_seed

logger = logging.getLogger(__name__)

VelocityFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def _require_same_shape(**tensors: torch.Tensor) -> None:
    shapes = {name: tuple(t.shape) for name, t in tensors.items()}
    if len(set(shapes.values())) != 1:
        raise InvalidInputError(f"Shape mismatch: {shapes}", field=next(iter(shapes)))


def _time_view(t, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-sample time against a latent batch."""
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        return t
    return t.view(-1, *([1] * (like.ndim - 1)))


# ===== Initialization and interpolation =====

def confidence_init(
    z_pc: torch.Tensor,
    w: torch.Tensor,
    noise: torch.Tensor,
    cfg: FlowConfig,
) -> torch.Tensor:
    """
    Confidence-aware source sample.

    Args:
        z_pc: Projected-prior latent (... x T x C x H' x W')
        w: Confidence plane (... x T x 1 x H' x W'), broadcast over channels
        noise: Gaussian noise with the shape of z_pc
        cfg: Flow config providing lambda1, lambda2 and renormalize_init

    Returns:
        z_0 = lambda1 * (w * z_pc) + lambda2 * noise, optionally divided by
        sqrt(lambda1^2 w^2 + lambda2^2)

    Raises:
        InvalidInputError: Shapes disagree
    """
    _require_same_shape(z_pc=z_pc, noise=noise)
    if w.shape[:-3] != z_pc.shape[:-3] or w.shape[-2:] != z_pc.shape[-2:] or w.shape[-3] not in (1, z_pc.shape[-3]):
        raise InvalidInputError(
            f"Confidence plane {tuple(w.shape)} does not broadcast to latent {tuple(z_pc.shape)}",
            field="w",
        )
    z0 = cfg.lambda1 * (w * z_pc) + cfg.lambda2 * noise
    if cfg.renormalize_init:
        scale = torch.sqrt((cfg.lambda1 * w) ** 2 + cfg.lambda2 ** 2)
        z0 = z0 / scale.clamp_min(1e-12)
    return z0


def rf_interpolate(z0: torch.Tensor, z1: torch.Tensor, t) -> torch.Tensor:
    """z_t = (1 - t) z_0 + t z_1 with t a scalar or one value per batch element."""
    tv = _time_view(t, z0)
    if ((tv < 0) | (tv > 1)).any():
        raise InvalidInputError("Flow time must lie in [0, 1]", field="t")
    return (1 - tv) * z0 + tv * z1


# ===== Objective =====

class LossTerms(NamedTuple):
    rf: torch.Tensor
    grad: torch.Tensor
    total: torch.Tensor


def rf_loss(v_pred: torch.Tensor, z0: torch.Tensor, z1: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the predicted velocity and z_1 - z_0."""
    _require_same_shape(v_pred=v_pred, z0=z0, z1=z1)
    return F.mse_loss(v_pred, z1 - z0)


def spatial_gradients(x: torch.Tensor):
    """Forward differences along width and height of every latent frame and channel."""
    return x[..., :, 1:] - x[..., :, :-1], x[..., 1:, :] - x[..., :-1, :]


def grad_reg_loss(v_pred: torch.Tensor, z_target: torch.Tensor) -> torch.Tensor:
    """mean|dx v - dx z| + mean|dy v - dy z|; an axis of size 1 contributes zero."""
    _require_same_shape(v_pred=v_pred, z_target=z_target)
    vx, vy = spatial_gradients(v_pred)
    zx, zy = spatial_gradients(z_target)
    loss = v_pred.new_zeros(())
    if vx.numel():
        loss = loss + (vx - zx).abs().mean()
    if vy.numel():
        loss = loss + (vy - zy).abs().mean()
    return loss


def loss_terms(v_pred: torch.Tensor, z0: torch.Tensor, z1: torch.Tensor, cfg: FlowConfig) -> LossTerms:
    rf = rf_loss(v_pred, z0, z1)
    grad = grad_reg_loss(v_pred, z1 - z0)
    total = rf + cfg.lambda_grad * grad if cfg.lambda_grad else rf
    return LossTerms(rf=rf, grad=grad, total=total)


def total_loss(v_pred: torch.Tensor, z0: torch.Tensor, z1: torch.Tensor, cfg: FlowConfig) -> torch.Tensor:
    """L = rf_loss + lambda_grad * grad_reg_loss (exactly rf_loss when lambda_grad = 0)."""
    return loss_terms(v_pred, z0, z1, cfg).total


# ===== Sampling =====

def sample(
    velocity_fn: VelocityFn,
    z0: torch.Tensor,
    steps: int,
    endpoint_latents: Optional[torch.Tensor] = None,
    endpoint_mask: Optional[torch.Tensor] = None,
    progress: bool = False,
) -> torch.Tensor:
    """
    Explicit Euler integration of dz/dt = v(z, t) from t = 0 to t = 1.

    When endpoint latents are given, the masked frames are re-imposed after
    every step on the straight path between their source sample and the
    endpoint latent, so they equal the endpoint latents exactly at t = 1.

    Args:
        velocity_fn: Callable (z, t) -> v with t of shape (B,)
        z0: Source sample B x T x C x H' x W'
        steps: Number of uniform steps (>= 1)
        endpoint_latents: Optional B x T x C x H' x W' latents to impose
        endpoint_mask: B x T indicator of imposed frames (required with endpoint_latents)
        progress: Show a tqdm bar

    Returns:
        Sampled latent with the shape of z0
    """
    if steps < 1:
        raise InvalidInputError(f"steps must be >= 1, got {steps}", field="steps", value=steps)
    if endpoint_latents is not None and endpoint_mask is None:
        raise InvalidInputError("endpoint_mask is required with endpoint_latents", field="endpoint_mask")

    keep = None
    if endpoint_latents is not None:
        _require_same_shape(z0=z0, endpoint_latents=endpoint_latents)
        keep = endpoint_mask.to(torch.bool).view(*endpoint_mask.shape, *([1] * (z0.ndim - endpoint_mask.ndim)))

    iterator: Iterator[int] = range(steps)
    if progress:
        iterator = tqdm(iterator, desc="sampling", total=steps, leave=False)

    z = z0
    dt = 1.0 / steps
    batch = z0.shape[0]
    with torch.no_grad():
        for k in iterator:
            t = torch.full((batch,), k / steps, dtype=z0.dtype, device=z0.device)
            z = z + dt * velocity_fn(z, t)
            if keep is not None:
                t_next = 1.0 if k == steps - 1 else (k + 1) / steps
                z = torch.where(keep, rf_interpolate(z0, endpoint_latents, t_next), z)
    return z


def draw_source(
    cond: SceneConditioning, cfg: FlowConfig, generator: torch.Generator
) -> torch.Tensor:
    """Draw eps with the generator and build z_0 for a batched conditioning."""
    noise = torch.randn(cond.z_pc.shape, generator=generator, dtype=torch.float32).to(cond.z_pc.dtype)
    return confidence_init(cond.z_pc, cond.confidence, noise, cfg)


def generate(
    model: nn.Module,
    cond: SceneConditioning,
    cfg: FlowConfig,
    flags: AblationFlags,
    seed: int,
    steps: Optional[int] = None,
    progress: bool = False,
) -> torch.Tensor:
    """
    Sample latent videos for a batched conditioning.

    Args:
        model: Velocity network
        cond: Batched conditioning
        cfg: Configured flow settings (ablation flags are applied here)
        flags: Ablation flags of the model
        seed: Sampling seed
        steps: Euler steps (defaults to cfg.sample_steps)
        progress: Show a tqdm bar

    Returns:
        B x T x C x H' x W' sampled latents
    """
    eff = effective_flow_config(cfg, flags)
    generator = torch.Generator().manual_seed(derive_seed(seed, "sample") % 2**63)
    z0 = draw_source(cond, eff, generator)
    was_training = model.training
    model.eval()
    try:
        return sample(
            lambda z, t: model(z, t, cond),
            z0,
            steps or eff.sample_steps,
            endpoint_latents=cond.endpoint_latents,
            endpoint_mask=cond.endpoint_mask,
            progress=progress,
        )
    finally:
        model.train(was_training)


# ===== Training =====

@dataclass
class StepResult:
    step: int
    rf_loss: float
    grad_loss: float
    total: float
    wall_ms: float


class FlowTrainer:
    """
    Single-writer trainer: Adam on total_loss over a fixed set of scene conditionings.

    Randomness of step n (batch choice, t, eps) comes from a generator seeded
    with derive_seed(cfg.seed, "train", n), so a run resumed at any step draws
    exactly what the uninterrupted run would have drawn.
    """

    def __init__(
        self,
        model: nn.Module,
        conditionings: List[SceneConditioning],
        cfg: FlowConfig,
        flags: AblationFlags,
        optimizer: Optional[torch.optim.Optimizer] = None,
    ):
        if not conditionings:
            raise InvalidInputError("Training needs at least one scene", field="dataset")
        self.model = model
        self.cfg = effective_flow_config(cfg, flags)
        self.flags = flags
        dtype = next(model.parameters()).dtype
        self.data = stack_conditioning(conditionings).to(dtype)
        self.optimizer = optimizer or torch.optim.Adam(model.parameters(), lr=self.cfg.learning_rate)

    @property
    def num_scenes(self) -> int:
        return self.data.z1.shape[0]

    def step_generator(self, step: int) -> torch.Generator:
        return torch.Generator().manual_seed(derive_seed(self.cfg.seed, "train", step) % 2**63)

    def make_batch(self, step: int):
        """Draw (batch conditioning, z_0, t) for a given step."""
        generator = self.step_generator(step)
        b = self.cfg.batch_size
        if b <= self.num_scenes:
            indices = torch.randperm(self.num_scenes, generator=generator)[:b]
        else:
            indices = torch.randint(self.num_scenes, (b,), generator=generator)
        cond = select(self.data, indices)
        t = torch.rand(b, generator=generator, dtype=torch.float32).to(cond.z1.dtype)
        z0 = draw_source(cond, self.cfg, generator)
        return cond, z0, t

    def compute_loss(self, step: int) -> LossTerms:
        cond, z0, t = self.make_batch(step)
        z_t = rf_interpolate(z0, cond.z1, t)
        v_pred = self.model(z_t, t, cond)
        return loss_terms(v_pred, z0, cond.z1, self.cfg)

    def train_step(self, step: int) -> StepResult:
        """
        One Adam step on the batch of the given step.

        Raises:
            NumericalFailureError: Loss is NaN or infinite (parameters are left untouched)
        """
        started = time.perf_counter()
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        terms = self.compute_loss(step)
        if not torch.isfinite(terms.total):
            raise NumericalFailureError(
                f"Non-finite loss at step {step}: rf={terms.rf.item()}, grad={terms.grad.item()}",
                field="step",
                value=step,
            )
        terms.total.backward()
        self.optimizer.step()
        return StepResult(
            step=step,
            rf_loss=terms.rf.item(),
            grad_loss=terms.grad.item(),
            total=terms.total.item(),
            wall_ms=(time.perf_counter() - started) * 1000.0,
        )

    def fit(
        self,
        start_step: int,
        end_step: int,
        on_step: Optional[Callable[[StepResult], None]] = None,
        progress: bool = False,
    ) -> List[StepResult]:
        """
        Run steps [start_step, end_step).

        Args:
            start_step: First step index (the number of steps already taken)
            end_step: One past the last step index
            on_step: Callback after every step (logging, checkpointing)
            progress: Show a tqdm bar

        Returns:
            Results of all executed steps
        """
        iterator: Iterator[int] = range(start_step, end_step)
        if progress:
            iterator = tqdm(iterator, desc="training", initial=start_step, total=end_step, leave=False)

        results = []
        for step in iterator:
            result = self.train_step(step)
            results.append(result)
            if on_step is not None:
                on_step(result)
        if results:
            logger.info(
                f"Trained steps {start_step}..{end_step - 1}: final rf_loss={results[-1].rf_loss:.5f}",
                extra={"step": end_step},
            )
        return results

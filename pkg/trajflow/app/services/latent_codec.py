"""
Exactly invertible patchify codec standing in for a video VAE, plus latent resizing.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
from einops import rearrange

from app.services.exceptions import InvalidInputError

CODEC_MEAN = 0.5
CODEC_SCALE = 2.0


@dataclass(frozen=True)
class LatentVideo:
    """Latent tensor T' x C x H' x W' plus the shape of the frames it encodes."""

    data: torch.Tensor
    patch_size: int
    original_size: Tuple[int, int, int]  # (T, H, W)

    @property
    def shape(self) -> torch.Size:
        return self.data.shape

    def with_data(self, data: torch.Tensor) -> "LatentVideo":
        return LatentVideo(data, self.patch_size, self.original_size)


def encode(frames, patch_size: int = 2) -> LatentVideo:
    """
    Rearrange p x p x 3 pixel blocks into 3p^2 channels and center them.

    Args:
        frames: T x H x W x 3 array or tensor in [0, 1]
        patch_size: Spatial patch size p

    Returns:
        LatentVideo of shape T x 3p^2 x H/p x W/p with values (x - 0.5) * 2

    Raises:
        InvalidInputError: H or W not divisible by p
    """
    x = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise InvalidInputError(f"Expected T x H x W x 3 frames, got {tuple(x.shape)}", field="frames")
    t, h, w, _ = x.shape
    if h % patch_size or w % patch_size:
        raise InvalidInputError(
            f"Frame size {h}x{w} is not divisible by patch size {patch_size}",
            field="patch_size",
            value=patch_size,
        )
    if not torch.is_floating_point(x):
        x = x.float()
    z = rearrange(x, "t (h p1) (w p2) c -> t (c p1 p2) h w", p1=patch_size, p2=patch_size)
    return LatentVideo((z - CODEC_MEAN) * CODEC_SCALE, patch_size, (t, h, w))


def decode(z: LatentVideo) -> torch.Tensor:
    """Exact inverse of encode; returns T x H x W x 3."""
    p = z.patch_size
    x = z.data / CODEC_SCALE + CODEC_MEAN
    return rearrange(x, "t (c p1 p2) h w -> t (h p1) (w p2) c", p1=p, p2=p, c=3)


def _lerp_axis(x: torch.Tensor, dim: int, size_out: int) -> torch.Tensor:
    """Linear interpolation along one axis with align-corners sampling."""
    size_in = x.shape[dim]
    if size_in == size_out:
        return x
    if size_in == 1:
        return x.expand(*[size_out if d == dim % x.ndim else -1 for d in range(x.ndim)]).contiguous()

    if size_out == 1:
        positions = torch.zeros(1, dtype=torch.float64)
    else:
        positions = torch.arange(size_out, dtype=torch.float64) * ((size_in - 1) / (size_out - 1))
    lower = positions.floor().clamp(max=size_in - 2).long()
    weight = (positions - lower).to(x.dtype)

    shape = [1] * x.ndim
    shape[dim] = size_out
    weight = weight.view(shape)
    v0 = x.index_select(dim, lower)
    v1 = x.index_select(dim, lower + 1)
    # v0 + w (v1 - v0) keeps constant signals exact
    return v0 + weight * (v1 - v0)


def resize_tensor(x: torch.Tensor, t_out: int, h_out: int, w_out: int) -> torch.Tensor:
    """Separable linear resize of the last T x C x H x W axes (temporal first, then spatial)."""
    if min(t_out, h_out, w_out) < 1:
        raise InvalidInputError(f"Target sizes must be >= 1, got {(t_out, h_out, w_out)}", field="size")
    x = _lerp_axis(x, -4, t_out)
    x = _lerp_axis(x, -2, h_out)
    return _lerp_axis(x, -1, w_out)


def resize_latent(z: LatentVideo, t_out: int, h_out: int, w_out: int) -> LatentVideo:
    """
    Resize a latent with separable linear interpolation (align-corners grid).

    Args:
        z: Latent to resize
        t_out: Target frame count
        h_out: Target latent height
        w_out: Target latent width

    Returns:
        Resized latent; bit-identical when the sizes already match
    """
    return z.with_data(resize_tensor(z.data, t_out, h_out, w_out))

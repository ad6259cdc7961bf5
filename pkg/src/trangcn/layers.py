import torch
from torch import nn

from .errors import ShapeError

# fixed per-channel statistics; inputs are already scaled to [0, 1]
IMAGE_MEAN = (0.5, 0.5, 0.5)
IMAGE_STD = (0.25, 0.25, 0.25)


def check_image(images: torch.Tensor, multiple: int = 32) -> None:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected images of shape (B, 3, rows, cols), got {tuple(images.shape)}")
    rows, cols = images.shape[-2:]
    if rows % multiple or cols % multiple:
        raise ShapeError(f"image size {rows}x{cols} must be a multiple of {multiple} in both dimensions")


def normalize_image(images: torch.Tensor) -> torch.Tensor:
    mean = images.new_tensor(IMAGE_MEAN).view(1, 3, 1, 1)
    std = images.new_tensor(IMAGE_STD).view(1, 3, 1, 1)
    return (images - mean) / std


def conv3x3(c_in: int, c_out: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)


def pointwise_mlp(c_in: int, hidden: int, c_out: int) -> nn.Sequential:
    """Two 1x1 convolutions, i.e. a fully connected layer applied per location."""
    return nn.Sequential(nn.Conv2d(c_in, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, c_out, 1))

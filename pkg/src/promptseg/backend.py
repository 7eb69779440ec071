"""The frozen segmentation backend: image encoder and prompt-driven mask decoder.

A backend is any object with the attributes ``name``, ``encoder_stride``,
``embed_dim``, ``frozen`` (always True) and the methods ``encode_image``,
``decode_masks`` and ``checksum``.  The mock backend implemented here is
fully deterministic and differentiable: the encoder is a fixed seeded linear
projection of non-overlapping pixel patches, and the decoder ignores image
features entirely, reading box geometry from the first four token dimensions.
That gives an exact analytic link between prompts and masks, which tests use
as an oracle.  Real pre-trained weights plug in through the adapter seam.
"""

from __future__ import annotations

import importlib
import importlib.util
from pathlib import Path

import torch

from .config import Config
from .errors import DimMismatch, InvalidConfig, ShapeMismatch
from .seeds import tensor_checksum, torch_generator
from .types import FeatureMap, ImageTensor, MaskLogits

# Slope of the soft rectangle rendered by the mock decoder.
RECT_SHARPNESS = 50.0


def render_soft_rect(box_params, sharpness: float, size: int) -> torch.Tensor:
    """Render one soft rectangle as a (size, size) logit plane.

    box_params is (cx, cy, w, h) in normalized [0, 1] coordinates; the logit
    at a pixel center is sharpness times the signed distance to the nearest
    box edge (positive strictly inside).  Degenerate extents are clamped to
    two pixels.
    """
    if sharpness <= 0:
        raise ValueError("sharpness must be > 0")
    cx, cy, w, h = _as_params(box_params)
    w = w.clamp(min=2.0 / size)
    h = h.clamp(min=2.0 / size)
    centers = (torch.arange(size, dtype=cx.dtype) + 0.5) / size
    x = centers[None, :]
    y = centers[:, None]
    inset = torch.minimum(
        torch.minimum(cx + w / 2 - x, x - (cx - w / 2)),
        torch.minimum(cy + h / 2 - y, y - (cy - h / 2)),
    )
    return sharpness * inset


def _as_params(box_params):
    if isinstance(box_params, torch.Tensor):
        if box_params.shape != (4,):
            raise ValueError(f"expected 4 box parameters, got shape {tuple(box_params.shape)}")
        return box_params[0], box_params[1], box_params[2], box_params[3]
    cx, cy, w, h = box_params
    t = torch.tensor([cx, cy, w, h], dtype=torch.float64)
    return t[0], t[1], t[2], t[3]


def invert_box_params(token: torch.Tensor) -> torch.Tensor:
    """Recover normalized (cx, cy, w, h) from a token: sigmoid of dims 0..3.

    Exact inverse of the logit map the teacher writes, so teacher-encoded
    boxes round-trip through the mock decoder.
    """
    if token.ndim != 1 or token.shape[0] < 4:
        raise DimMismatch(f"token must have at least 4 dims, got shape {tuple(token.shape)}")
    return torch.sigmoid(token[:4])


class MockBackend:
    """Deterministic stand-in for a pre-trained promptable segmentation model."""

    def __init__(self, cfg: Config):
        self.name = "mock"
        self.encoder_stride = cfg.encoder_stride
        self.embed_dim = cfg.embed_dim
        self.frozen = True
        self._image_size = cfg.image_size
        self._token_dim = cfg.token_dim
        patch = cfg.encoder_stride * cfg.encoder_stride * 3
        gen = torch_generator(cfg.seed, "backend.encode")
        self._projection = torch.randn(patch, cfg.embed_dim, generator=gen) / patch**0.5

    def encode_image(self, image: ImageTensor) -> FeatureMap:
        image.validate(self._image_size)
        s = self.encoder_stride
        side = self._image_size // s
        pixels = image.pixels
        patches = (
            pixels.reshape(side, s, side, s, 3)
            .permute(0, 2, 1, 3, 4)
            .reshape(side, side, s * s * 3)
        )
        features = (patches - 0.5) @ self._projection.to(pixels.dtype)
        return FeatureMap(features=features, stride=s)

    def decode_masks(self, features: FeatureMap, prompt_tokens: torch.Tensor) -> MaskLogits:
        """One logit plane per token group; differentiable in prompt_tokens.

        The mock reads geometry from the tokens only; features are accepted
        for interface compatibility with real backends.
        """
        if prompt_tokens.ndim != 2:
            raise DimMismatch(f"expected (N, token_dim) tokens, got shape {tuple(prompt_tokens.shape)}")
        if prompt_tokens.shape[0] > 0 and prompt_tokens.shape[1] != self._token_dim:
            raise DimMismatch(
                f"token width {prompt_tokens.shape[1]} != expected {self._token_dim}")
        size = self._image_size
        n = prompt_tokens.shape[0]
        if n == 0:
            return MaskLogits(torch.zeros(0, size, size, dtype=prompt_tokens.dtype))
        planes = []
        for i in range(n):
            params = torch.sigmoid(prompt_tokens[i, :4])
            planes.append(render_soft_rect(params, RECT_SHARPNESS, size))
        return MaskLogits(torch.stack(planes))

    def checksum(self) -> str:
        return tensor_checksum({"projection": self._projection})


def load_backend(spec: str, cfg: Config):
    """Build a backend from a CLI-style spec: "mock" or "adapter:<path>"."""
    if spec == "mock":
        return MockBackend(cfg)
    if spec.startswith("adapter:"):
        return _load_adapter(spec[len("adapter:"):], cfg)
    raise InvalidConfig(f"unknown backend {spec!r}; expected 'mock' or 'adapter:<path>'")


def _load_adapter(path: str, cfg: Config):
    if path.endswith(".py"):
        module_spec = importlib.util.spec_from_file_location(Path(path).stem, path)
        if module_spec is None or module_spec.loader is None:
            raise InvalidConfig(f"cannot load adapter module from {path!r}")
        module = importlib.util.module_from_spec(module_spec)
        module_spec.loader.exec_module(module)
    else:
        module = importlib.import_module(path)
    if not hasattr(module, "create_backend"):
        raise InvalidConfig(f"adapter module {path!r} must define create_backend(config)")
    backend = module.create_backend(cfg)
    validate_backend(backend)
    return backend


def validate_backend(backend) -> None:
    for attr in ("name", "encoder_stride", "embed_dim", "frozen"):
        if not hasattr(backend, attr):
            raise InvalidConfig(f"backend lacks required attribute {attr!r}")
    for method in ("encode_image", "decode_masks", "checksum"):
        if not callable(getattr(backend, method, None)):
            raise InvalidConfig(f"backend lacks required method {method!r}")
    if backend.frozen is not True:
        raise InvalidConfig("backend.frozen must be True")

"""Pluggable joint image-text embedders and perceptual feature extractors.

Every consumer in this package talks to two small contracts:

* :class:`EmbeddingBackend` — maps images and texts into one shared vector
  space, compared exclusively by cosine similarity.
* :class:`PerceptualBackend` — maps an image to a named set of feature
  tensors for content/style distances.

Both come with deterministic mock implementations so the full pipeline is
testable without downloading model weights. Real backends (a ViT-B/32 joint
embedder via ``transformers``, VGG-19 via ``torchvision``) load weights from
a local path or the standard cache and raise :class:`BackendLoadError` when
unavailable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (
    BackendLoadError,
    ConfigurationError,
    DegenerateInputError,
    RejectedInputError,
)

_EPS = 1e-12


@dataclass(frozen=True)
class Embedding:
    """A fixed-dimension vector in the joint image-text space.

    Compared only by cosine similarity; raw dot products are never
    meaningful across backends.
    """

    values: torch.Tensor

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class PerceptualFeatures:
    """Ordered map from layer name to a channel-last feature tensor."""

    layers: dict[str, torch.Tensor]


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    embed_dim: int
    image_input_size: int
    differentiable: bool

    def __post_init__(self):
        if self.embed_dim <= 0 or self.image_input_size <= 0:
            raise ConfigurationError("embed_dim and image_input_size must be positive")


def as_image_tensor(img) -> torch.Tensor:
    """Coerce an (H, W, 3) array to a float tensor, keeping autograd if present.

    Rejects inputs with non-finite pixels or the wrong channel count.
    """
    t = torch.as_tensor(img)
    if t.ndim != 3 or t.shape[-1] != 3:
        raise RejectedInputError(f"expected (H, W, 3) image, got {tuple(t.shape)}")
    if not t.is_floating_point():
        t = t.to(torch.float32)
    if not torch.isfinite(t).all():
        raise RejectedInputError("image contains non-finite pixels")
    return t


def cosine_similarity(a: Embedding, b: Embedding) -> torch.Tensor:
    """Cosine similarity between two embeddings of equal dimension.

    Zero-norm vectors are an error rather than being clamped: they only
    arise from bugs or degenerate mocks. Returns a 0-dim tensor so gradients
    can flow when the inputs carry autograd state.
    """
    va, vb = a.values, b.values
    if va.shape != vb.shape:
        raise ConfigurationError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na = torch.linalg.vector_norm(va)
    nb = torch.linalg.vector_norm(vb)
    if float(na) < _EPS or float(nb) < _EPS:
        raise DegenerateInputError("zero-norm embedding in cosine similarity")
    return (va * vb).sum() / (na * nb)


class EmbeddingBackend:
    """Contract for joint image-text embedders.

    Read-only after construction; embed calls are safe from concurrent
    workers. Image preprocessing (resizing, normalization) is owned by the
    backend, never by callers.
    """

    descriptor: BackendDescriptor

    def embed_image(self, img) -> Embedding:
        raise NotImplementedError

    def embed_text(self, text: str) -> Embedding:
        raise NotImplementedError


class PerceptualBackend:
    """Contract for perceptual feature extractors."""

    name: str
    layer_names: tuple[str, ...]

    def perceptual_features(self, img, layer_names) -> PerceptualFeatures:
        raise NotImplementedError

    def _check_layers(self, layer_names):
        unknown = [n for n in layer_names if n not in self.layer_names]
        if unknown:
            raise ConfigurationError(
                f"unknown perceptual layers {unknown}; backend '{self.name}' "
                f"provides {list(self.layer_names)}"
            )


def _token_color(token: str) -> np.ndarray:
    """Deterministic pseudo-color for a token: first 3 bytes of blake2b / 255."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=3).digest()
    return np.frombuffer(digest, dtype=np.uint8).astype(np.float64) / 255.0


# Fixed published mixing matrix of the mock embedder. Column 4 carries the
# constant bias input; its small weight keeps embeddings of different colors
# well separated in angle while guaranteeing a nonzero vector for black.
MOCK_MATRIX = np.array(
    [
        [1.0, 0.0, 0.0, 0.00],
        [0.0, 1.0, 0.0, 0.00],
        [0.0, 0.0, 1.0, 0.00],
        [0.0, 0.0, 0.0, 0.25],
        [1.0, 1.0, 0.0, 0.00],
        [0.0, 1.0, 1.0, 0.00],
        [1.0, 0.0, 1.0, 0.00],
        [1.0, -1.0, 1.0, 0.00],
    ]
)


class MockEmbeddingBackend(EmbeddingBackend):
    """Deterministic, differentiable 8-dim embedder used throughout the tests.

    Published mapping, simple enough to evaluate by hand:

    * ``embed_image(img) = MOCK_MATRIX @ (mean_R, mean_G, mean_B, 1)`` —
      a pure function of the image's mean color, linear in the pixels, so
      autograd gradients are exact and brute-force oracles are closed-form.
    * ``embed_text(text) = MOCK_MATRIX @ (c_R, c_G, c_B, 1)`` where the text
      color ``c`` is looked up in ``color_overrides`` (exact normalized text
      first, then per-token mean) and otherwise derived per token from a
      blake2b hash (first 3 digest bytes / 255).

    ``color_overrides`` lets tests steer text vectors onto exact color
    directions, e.g. to point a text delta at a known hue shift.
    """

    def __init__(self, color_overrides: dict[str, tuple[float, float, float]] | None = None,
                 template: str | None = None):
        self.descriptor = BackendDescriptor(
            name="mock", embed_dim=8, image_input_size=224, differentiable=True
        )
        self.color_overrides = dict(color_overrides or {})
        self.template = template

    def embed_image(self, img) -> Embedding:
        t = as_image_tensor(img)
        mean_rgb = t.reshape(-1, 3).mean(dim=0)
        matrix = torch.as_tensor(MOCK_MATRIX, dtype=t.dtype)
        one = torch.ones(1, dtype=t.dtype)
        return Embedding(matrix @ torch.cat([mean_rgb, one]))

    def embed_text(self, text: str) -> Embedding:
        if not isinstance(text, str) or not text.strip():
            raise RejectedInputError("text must be a non-empty string")
        if self.template:
            text = self.template.format(text)
        color = self._text_color(text)
        vec = MOCK_MATRIX @ np.concatenate([color, [1.0]])
        return Embedding(torch.as_tensor(vec, dtype=torch.float32))

    def _text_color(self, text: str) -> np.ndarray:
        key = " ".join(text.lower().split())
        if key in self.color_overrides:
            return np.asarray(self.color_overrides[key], dtype=np.float64)
        tokens = key.split()
        colors = [
            np.asarray(self.color_overrides[tok], dtype=np.float64)
            if tok in self.color_overrides
            else _token_color(tok)
            for tok in tokens
        ]
        return np.mean(colors, axis=0)


class MockPerceptualBackend(PerceptualBackend):
    """Identity features: one layer named ``identity`` equal to the image."""

    name = "mock"
    layer_names = ("identity",)

    def perceptual_features(self, img, layer_names) -> PerceptualFeatures:
        self._check_layers(layer_names)
        t = as_image_tensor(img)
        return PerceptualFeatures(layers={name: t for name in layer_names})


class ClipVitB32Backend(EmbeddingBackend):
    """ViT-B/32 joint embedder loaded through ``transformers``.

    ``weights_path`` may be a local directory or a hub identifier already in
    the cache; anything that fails to load raises BackendLoadError.
    """

    def __init__(self, weights_path: str = "openai/clip-vit-base-patch32",
                 template: str | None = None):
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:
            raise BackendLoadError(f"transformers unavailable: {exc}") from exc
        try:
            self._model = CLIPModel.from_pretrained(weights_path)
            self._tokenizer = CLIPTokenizer.from_pretrained(weights_path)
        except Exception as exc:
            raise BackendLoadError(f"could not load joint embedder from '{weights_path}': {exc}") from exc
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self.template = template
        size = int(self._model.config.vision_config.image_size)
        self.descriptor = BackendDescriptor(
            name="clip-vit-b32",
            embed_dim=int(self._model.config.projection_dim),
            image_input_size=size,
            differentiable=True,
        )
        self._mean = torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(3, 1, 1)
        self._std = torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(3, 1, 1)

    def embed_image(self, img) -> Embedding:
        t = as_image_tensor(img).permute(2, 0, 1).unsqueeze(0)
        size = self.descriptor.image_input_size
        t = torch.nn.functional.interpolate(
            t, size=(size, size), mode="bicubic", align_corners=False
        )
        t = (t - self._mean.to(t.dtype)) / self._std.to(t.dtype)
        feats = self._model.get_image_features(pixel_values=t)
        return Embedding(feats[0])

    def embed_text(self, text: str) -> Embedding:
        if not isinstance(text, str) or not text.strip():
            raise RejectedInputError("text must be a non-empty string")
        if self.template:
            text = self.template.format(text)
        tokens = self._tokenizer([text], padding=True, return_tensors="pt")
        with torch.no_grad():
            feats = self._model.get_text_features(**tokens)
        return Embedding(feats[0])


# torchvision vgg19.features indices of the conv outputs we expose.
_VGG19_LAYER_INDEX = {
    "conv1_2": 2,
    "conv2_2": 7,
    "conv3_2": 12,
    "conv4_2": 21,
    "conv5_2": 30,
}


class Vgg19PerceptualBackend(PerceptualBackend):
    """VGG-19 conv features via torchvision, channel-last per this package's convention."""

    name = "vgg19"
    layer_names = tuple(_VGG19_LAYER_INDEX)

    def __init__(self, weights_path: str | None = None):
        try:
            from torchvision.models import vgg19
        except ImportError as exc:
            raise BackendLoadError(f"torchvision unavailable: {exc}") from exc
        try:
            if weights_path:
                model = vgg19(weights=None)
                state = torch.load(weights_path, map_location="cpu")
                model.load_state_dict(state)
            else:
                from torchvision.models import VGG19_Weights

                model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise BackendLoadError(f"could not load vgg19 weights: {exc}") from exc
        self._features = model.features.eval()
        for p in self._features.parameters():
            p.requires_grad_(False)
        self._mean = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
        self._std = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)

    def perceptual_features(self, img, layer_names) -> PerceptualFeatures:
        self._check_layers(layer_names)
        t = as_image_tensor(img).permute(2, 0, 1)
        t = (t - self._mean.to(t.dtype)) / self._std.to(t.dtype)
        x = t.unsqueeze(0)
        wanted = {_VGG19_LAYER_INDEX[n]: n for n in layer_names}
        out: dict[str, torch.Tensor] = {}
        for i, layer in enumerate(self._features):
            x = layer(x)
            if i in wanted:
                out[wanted[i]] = x[0].permute(1, 2, 0)
            if not wanted.keys() - set(range(i + 1)):
                break
        return PerceptualFeatures(layers={n: out[n] for n in layer_names})


def create_embedding_backend(name: str, *, weights_path: str | None = None,
                             template: str | None = None,
                             color_overrides=None) -> EmbeddingBackend:
    if name == "mock":
        return MockEmbeddingBackend(color_overrides=color_overrides, template=template)
    if name == "clip-vit-b32":
        return ClipVitB32Backend(
            weights_path=weights_path or "openai/clip-vit-base-patch32", template=template
        )
    raise ConfigurationError(f"unknown embedding backend '{name}'")


def create_perceptual_backend(name: str, *, weights_path: str | None = None) -> PerceptualBackend:
    if name == "mock":
        return MockPerceptualBackend()
    if name == "vgg19":
        return Vgg19PerceptualBackend(weights_path=weights_path)
    raise ConfigurationError(f"unknown perceptual backend '{name}'")

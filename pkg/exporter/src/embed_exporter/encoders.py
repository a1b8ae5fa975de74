"""Image encoder backends.

``clip-vit-l14`` is the default: the CLIP ViT-L/14 vision tower, taking
the class token of the final transformer layer before the projection head
(``--projected`` switches to the projected embedding, ``--pooling mean``
to mean-pooled patch tokens). ``tiny-deterministic`` is a dependency-free
seeded encoder for offline fixtures and format tests; it is not a
pretrained model and says so loudly.
"""

import numpy as np
from PIL import Image


class EncoderLoadError(RuntimeError):
    pass


class ClipEncoder:
    """CLIP vision tower via transformers; weights must be obtainable."""

    MODEL_ID = "openai/clip-vit-large-patch14"

    def __init__(self, device: str = "cpu", projected: bool = False,
                 pooling: str = "class"):
        if pooling not in ("class", "mean"):
            raise ValueError("pooling must be 'class' or 'mean'")
        try:
            import torch
            from transformers import CLIPImageProcessor, CLIPVisionModel, \
                CLIPVisionModelWithProjection
        except ImportError as e:
            raise EncoderLoadError(
                f"clip encoder needs torch+transformers: {e}") from e
        self._torch = torch
        self.projected = projected
        self.pooling = pooling
        self.device = device
        try:
            self.processor = CLIPImageProcessor.from_pretrained(
                self.MODEL_ID)
            cls = (CLIPVisionModelWithProjection if projected
                   else CLIPVisionModel)
            self.model = cls.from_pretrained(self.MODEL_ID)
        except Exception as e:
            raise EncoderLoadError(
                f"could not load {self.MODEL_ID}: {e}") from e
        self.model.eval().to(device)
        self.dim = (self.model.config.projection_dim if projected
                    else self.model.config.hidden_size)
        self.name = (f"clip-vit-l14{'+proj' if projected else ''}"
                     f"/{pooling}")

    def encode_batch(self, images) -> np.ndarray:
        torch = self._torch
        inputs = self.processor(images=images, return_tensors="pt")
        with torch.no_grad():
            out = self.model(inputs["pixel_values"].to(self.device))
            if self.projected:
                vecs = out.image_embeds
            else:
                hidden = out.last_hidden_state  # (N, 1+patches, width)
                vecs = (hidden[:, 1:].mean(dim=1)
                        if self.pooling == "mean" else hidden[:, 0])
        return vecs.cpu().numpy().astype(np.float64)


class TinyDeterministicEncoder:
    """Seeded random-projection encoder for offline tests.

    Not pretrained: downsamples to 32x32, applies a fixed random linear map
    plus tanh, and normalizes. Deterministic per pixel content.
    """

    def __init__(self, dim: int = 64, seed: int = 7):
        self.dim = dim
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7e57]))
        self._proj = rng.standard_normal((dim, 32 * 32 * 3)) / np.sqrt(
            32 * 32 * 3)
        self.name = f"tiny-deterministic-{dim}"

    def encode_batch(self, images) -> np.ndarray:
        out = np.zeros((len(images), self.dim))
        for i, img in enumerate(images):
            small = img.convert("RGB").resize((32, 32), Image.NEAREST)
            flat = np.asarray(small, dtype=np.float64).ravel() / 255.0
            out[i] = np.tanh(self._proj @ (flat - 0.5))
        return out


def make_encoder(name: str, device: str = "cpu", projected: bool = False,
                 pooling: str = "class", dim: int = 64):
    if name == "clip-vit-l14":
        return ClipEncoder(device=device, projected=projected,
                           pooling=pooling)
    if name == "tiny-deterministic":
        return TinyDeterministicEncoder(dim=dim)
    raise ValueError(f"unknown encoder {name!r} (choices: clip-vit-l14, "
                     "tiny-deterministic)")

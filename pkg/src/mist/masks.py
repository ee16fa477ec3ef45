"""Block layouts and causal attention mask builders.

A set of N images is split into K contiguous blocks of B images; every
mask below is a pure function of the layout and spatial dims, never of
the data. Query/key flattening is image-major: flat index of (image i,
patch p) is i * H * W + p, with p = row * W + col.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import mask_sentinel


@dataclass(frozen=True)
class BlockLayout:
    """Decomposition of n_images into n_blocks contiguous blocks of block_size."""

    n_images: int
    block_size: int

    def __post_init__(self):
        if self.n_images <= 0 or self.block_size <= 0:
            raise ValueError(f"layout extents must be positive, got N={self.n_images}, B={self.block_size}")
        if self.n_images % self.block_size:
            raise ValueError(f"block_size {self.block_size} does not divide n_images {self.n_images}")

    @property
    def n_blocks(self) -> int:
        return self.n_images // self.block_size

    def block_of(self, image_index: int) -> int:
        if not 0 <= image_index < self.n_images:
            raise ValueError(f"image index {image_index} outside [0, {self.n_images})")
        return image_index // self.block_size


@dataclass(frozen=True)
class AttentionMask:
    """Boolean query x key admissibility matrix."""

    allowed: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.allowed, dtype=bool)
        if a.ndim != 2:
            raise ValueError(f"mask must be 2-d, got shape {a.shape}")
        object.__setattr__(self, "allowed", a)

    @property
    def rows(self) -> int:
        return self.allowed.shape[0]

    @property
    def cols(self) -> int:
        return self.allowed.shape[1]

    def to_bias(self, dtype=np.float32) -> np.ndarray:
        """Additive form: 0 where allowed, the finite -inf sentinel elsewhere."""
        bias = np.zeros(self.allowed.shape, dtype=dtype)
        bias[~self.allowed] = mask_sentinel(dtype)
        return bias

    def key_visits(self) -> int:
        """Total admissible (query, key) pairs; the cost-model unit."""
        return int(self.allowed.sum())


def _image_of_patch(n_images: int, patches_per_image: int) -> np.ndarray:
    return np.repeat(np.arange(n_images), patches_per_image)


def build_block_self_mask(layout: BlockLayout, h: int, w: int) -> AttentionMask:
    """Intra-block self-attention over noisy patches.

    Patch (i, p) may attend patch (j, q) iff images i and j share a block;
    positions are unrestricted within the block.
    """
    img = _image_of_patch(layout.n_images, h * w)
    blk = img // layout.block_size
    return AttentionMask(blk[:, None] == blk[None, :])


def build_global_causal_mask(layout: BlockLayout, h: int, w: int) -> AttentionMask:
    """Noisy patches attend every clean patch of strictly earlier blocks."""
    img = _image_of_patch(layout.n_images, h * w)
    blk = img // layout.block_size
    return AttentionMask(blk[None, :] < blk[:, None])


def build_set_axis_causal_mask(layout: BlockLayout) -> AttentionMask:
    """Per spatial location: noisy image i attends clean image j iff
    block(j) < block(i). One N x N matrix shared by all locations."""
    blk = np.arange(layout.n_images) // layout.block_size
    return AttentionMask(blk[None, :] < blk[:, None])


def build_external_causal_mask(n_images: int, n_tokens: int, h: int = 1, w: int = 1) -> AttentionMask:
    """Noisy patches attend feature tokens of strictly earlier images.

    Equivalent to the global mask with block size 1, with each image
    contributing n_tokens key slots instead of patches.
    """
    if n_images <= 0 or n_tokens <= 0:
        raise ValueError(f"need positive counts, got N={n_images}, S={n_tokens}")
    qimg = _image_of_patch(n_images, h * w)
    kimg = _image_of_patch(n_images, n_tokens)
    return AttentionMask(kimg[None, :] < qimg[:, None])

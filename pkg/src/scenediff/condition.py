"""Per-object condition vectors: box encoding, feature-patch CNN, class one-hot, null token."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor

BOX_FREQUENCIES = 10
PATCH_SIZE = 8
PATCH_CHANNELS = 2  # masked depth (metres / 5), instance mask


@dataclass
class ObjectObservation:
    box2d: np.ndarray   # (left, top, right, bottom) pixels
    patch: np.ndarray   # (PATCH_SIZE, PATCH_SIZE, PATCH_CHANNELS)
    class_id: int

    def __post_init__(self):
        self.box2d = np.asarray(self.box2d, dtype=np.float64).reshape(4)
        l, t, r, b = self.box2d
        if not (r > l and b > t):
            raise ValueError(f"degenerate 2D box {self.box2d}")


def box_embedding_dim(frequencies: int = BOX_FREQUENCIES) -> int:
    return 4 * (1 + 2 * frequencies)


def embed_box(box: np.ndarray, frequencies: int = BOX_FREQUENCIES) -> np.ndarray:
    """Sinusoidal encoding of normalised box corners.

    ``box`` is ``(..., 4)`` in ``[0, 1]``; each coordinate contributes its raw
    value, then ``sin(2^k pi x)`` for k < frequencies, then the cosines.
    """
    box = np.asarray(box, dtype=np.float64)
    freqs = (2.0 ** np.arange(frequencies)) * np.pi
    args = box[..., :, None] * freqs
    per = np.concatenate([box[..., :, None], np.sin(args), np.cos(args)], axis=-1)
    return per.reshape(*box.shape[:-1], 4 * (1 + 2 * frequencies))


def normalize_box(box2d: np.ndarray, width: int, height: int) -> np.ndarray:
    box2d = np.asarray(box2d, dtype=np.float64)
    return box2d / np.array([width, height, width, height], dtype=np.float64)


def embed_class(class_id, class_count: int) -> np.ndarray:
    ids = np.atleast_1d(np.asarray(class_id, dtype=np.int64))
    if np.any(ids < 0) or np.any(ids >= class_count):
        raise ValueError(f"class id out of range [0, {class_count}): {class_id}")
    out = np.eye(class_count)[ids]
    return out[0] if np.ndim(class_id) == 0 else out


class FeatureEncoder(nn.Module):
    """Three conv blocks (3x3 conv, group norm, leaky ReLU) on an 8x8 patch, flattened.

    The middle block downsamples to 4x4; the last block has ``width / 16``
    channels so the flattened output has exactly ``width`` entries.
    """

    def __init__(self, width: int = 64, hidden: int = 16, rng: np.random.Generator | None = None):
        if width % 16:
            raise ValueError("feature width must be a multiple of 16")
        rng = rng or np.random.default_rng(0)
        c_out = width // 16
        self.width = width
        self.conv1 = nn.Conv3x3(PATCH_CHANNELS, hidden, PATCH_SIZE, PATCH_SIZE, 1, rng)
        self.norm1 = nn.GroupNorm(4, hidden)
        self.conv2 = nn.Conv3x3(hidden, hidden, PATCH_SIZE, PATCH_SIZE, 2, rng)
        self.norm2 = nn.GroupNorm(4, hidden)
        self.conv3 = nn.Conv3x3(hidden, c_out, 4, 4, 1, rng)
        self.norm3 = nn.GroupNorm(2 if c_out % 2 == 0 else 1, c_out)

    def forward(self, patches) -> Tensor:
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=self.conv1.lin.weight.dtype))
        if x.shape[1:] != (PATCH_SIZE, PATCH_SIZE, PATCH_CHANNELS):
            raise ValueError(f"feature patch extent {x.shape[1:]} != {(PATCH_SIZE, PATCH_SIZE, PATCH_CHANNELS)}")
        b = x.shape[0]
        h = T.reshape(x, (b, PATCH_SIZE * PATCH_SIZE, PATCH_CHANNELS))
        h = T.leaky_relu(self.norm1(self.conv1(h)))
        h = T.leaky_relu(self.norm2(self.conv2(h)))
        h = T.leaky_relu(self.norm3(self.conv3(h)))
        return T.reshape(h, (b, self.width))


class ConditionEncoder(nn.Module):
    """Builds ``y_i = concat(box_emb, feat_emb, class_onehot)`` and owns the null token."""

    def __init__(self, feat_width: int = 64, class_count: int = 8, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.class_count = class_count
        self.features = FeatureEncoder(feat_width, rng=rng)
        self.width = box_embedding_dim() + feat_width + class_count
        self.null = nn.parameter(rng.normal(0.0, 0.5, self.width))

    def forward(self, boxes_norm: np.ndarray, patches: np.ndarray, class_ids: np.ndarray,
                drop: np.ndarray | None = None) -> Tensor:
        """``(N, width)`` conditions; rows with ``drop`` set become the null token."""
        dt = self.null.dtype
        n = len(class_ids)
        box = Tensor(embed_box(boxes_norm).astype(dt))
        feat = self.features(np.asarray(patches, dtype=dt))
        cls = Tensor(embed_class(np.asarray(class_ids), self.class_count).reshape(n, -1).astype(dt))
        y = T.concat([box, feat, cls], axis=1)
        if drop is None or not np.any(drop):
            return y
        keep = (~np.asarray(drop, dtype=bool)).astype(dt)[:, None]
        return T.add(T.affine(y, keep), T.affine(self.null, 1.0 - keep))

    def null_condition(self, n: int) -> Tensor:
        return T.affine(self.null, np.ones((n, 1), dtype=self.null.dtype))


def assemble_condition(encoder: ConditionEncoder, observations: list[ObjectObservation], width: int, height: int,
                       drop_rng: np.random.Generator | None = None, p: float = 0.0) -> tuple[Tensor, bool]:
    """Scene condition for one scene; with probability ``p`` every slot becomes the null token."""
    if not observations:
        raise ValueError("a scene condition needs at least one observation")
    boxes = np.stack([normalize_box(o.box2d, width, height) for o in observations])
    patches = np.stack([o.patch for o in observations])
    classes = np.array([o.class_id for o in observations])
    dropped = bool(drop_rng is not None and p > 0 and drop_rng.random() < p)
    drop = np.full(len(observations), dropped)
    return encoder(boxes, patches, classes, drop), dropped

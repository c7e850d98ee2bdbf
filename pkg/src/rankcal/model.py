"""Multimodal classifier over arbitrary nonempty modality subsets.

Each modality gets its own two-layer encoder (affine -> ReLU -> affine); the
latents of the modalities that are actually present are fused by an arithmetic
mean and fed to a shared linear head. Removing a modality is true absence via
the mask, never zero-filling, so the same parameters serve every subset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, MaskError, SpecError, StateError
from .numerics import (
    Array,
    affine_backward,
    affine_forward,
    relu,
    relu_backward,
    softmax,
)

CHECKPOINT_MAGIC = "rankcal-checkpoint v1"


@dataclass(frozen=True)
class ModelSpec:
    modality_dims: tuple[int, ...]
    hidden_dim: int
    latent_dim: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        if len(self.modality_dims) < 2:
            raise SpecError("need at least 2 modalities")
        if any(d < 1 for d in self.modality_dims):
            raise SpecError(f"modality dims must be >= 1, got {self.modality_dims}")
        if self.hidden_dim < 1 or self.latent_dim < 1:
            raise SpecError("hidden_dim and latent_dim must be >= 1")
        if self.num_classes < 2:
            raise SpecError("need at least 2 classes")

    @property
    def num_modalities(self) -> int:
        return len(self.modality_dims)

    def to_json_dict(self) -> dict:
        return {
            "modality_dims": list(self.modality_dims),
            "hidden_dim": self.hidden_dim,
            "latent_dim": self.latent_dim,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ModelSpec":
        return cls(
            modality_dims=tuple(obj["modality_dims"]),
            hidden_dim=int(obj["hidden_dim"]),
            latent_dim=int(obj["latent_dim"]),
            num_classes=int(obj["num_classes"]),
        )


@dataclass(frozen=True)
class SubsetMask:
    """Nonempty set of modality indices presented to the model."""

    present: frozenset[int]

    def __post_init__(self):
        if not self.present:
            raise MaskError("mask must contain at least one modality")
        if any((not isinstance(i, (int, np.integer))) or i < 0 for i in self.present):
            raise MaskError(f"mask indices must be non-negative integers: {self.present}")
        object.__setattr__(self, "present", frozenset(int(i) for i in self.present))

    @classmethod
    def of(cls, indices) -> "SubsetMask":
        return cls(frozenset(indices))

    @classmethod
    def full(cls, num_modalities: int) -> "SubsetMask":
        return cls(frozenset(range(num_modalities)))

    def __len__(self) -> int:
        return len(self.present)

    def __contains__(self, index: int) -> bool:
        return index in self.present

    def is_subset_of(self, other: "SubsetMask") -> bool:
        return self.present < other.present

    def sorted_indices(self) -> tuple[int, ...]:
        return tuple(sorted(self.present))

    def validate_for(self, num_modalities: int) -> None:
        if any(i >= num_modalities for i in self.present):
            raise MaskError(f"mask {self.format()} out of range for {num_modalities} modalities")

    def format(self) -> str:
        return "+".join(str(i) for i in self.sorted_indices())

    @classmethod
    def parse(cls, text: str) -> "SubsetMask":
        try:
            return cls.of(int(part) for part in text.split("+"))
        except ValueError as exc:
            raise MaskError(f"cannot parse mask {text!r}") from exc


@dataclass
class EncoderParams:
    w1: Array
    b1: Array
    w2: Array
    b2: Array


@dataclass
class ClassifierParams:
    encoders: list[EncoderParams]
    head_w: Array
    head_b: Array

    @property
    def num_modalities(self) -> int:
        return len(self.encoders)

    def arrays(self) -> Iterator[Array]:
        """All parameter arrays in declaration order (also the checkpoint order)."""
        for enc in self.encoders:
            yield enc.w1
            yield enc.b1
            yield enc.w2
            yield enc.b2
        yield self.head_w
        yield self.head_b

    def spec_signature(self) -> tuple:
        return tuple(a.shape for a in self.arrays())

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(
            encoders=[
                EncoderParams(e.w1.copy(), e.b1.copy(), e.w2.copy(), e.b2.copy())
                for e in self.encoders
            ],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
        )


def derived_spec(params: ClassifierParams) -> ModelSpec:
    """Reconstruct the ModelSpec implied by parameter shapes."""
    return ModelSpec(
        modality_dims=tuple(e.w1.shape[0] for e in params.encoders),
        hidden_dim=params.encoders[0].w1.shape[1],
        latent_dim=params.head_w.shape[0],
        num_classes=params.head_w.shape[1],
    )


def init_params(spec: ModelSpec, seed: int) -> ClassifierParams:
    """Uniform Xavier weights in +-sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)

    def xavier(fan_in: int, fan_out: int) -> Array:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    encoders = []
    for d in spec.modality_dims:
        encoders.append(
            EncoderParams(
                w1=xavier(d, spec.hidden_dim),
                b1=np.zeros(spec.hidden_dim),
                w2=xavier(spec.hidden_dim, spec.latent_dim),
                b2=np.zeros(spec.latent_dim),
            )
        )
    return ClassifierParams(
        encoders=encoders,
        head_w=xavier(spec.latent_dim, spec.num_classes),
        head_b=np.zeros(spec.num_classes),
    )


def zeros_like_params(params: ClassifierParams) -> ClassifierParams:
    return ClassifierParams(
        encoders=[
            EncoderParams(
                np.zeros_like(e.w1), np.zeros_like(e.b1), np.zeros_like(e.w2), np.zeros_like(e.b2)
            )
            for e in params.encoders
        ],
        head_w=np.zeros_like(params.head_w),
        head_b=np.zeros_like(params.head_b),
    )


def add_params(into: ClassifierParams, other: ClassifierParams) -> None:
    """In-place accumulation, used when summing per-sample gradients."""
    for a, b in zip(into.arrays(), other.arrays()):
        a += b


def scale_params(params: ClassifierParams, factor: float) -> None:
    for a in params.arrays():
        a *= factor


def flatten_params(params: ClassifierParams) -> Array:
    return np.concatenate([a.ravel() for a in params.arrays()])


def unflatten_params(template: ClassifierParams, flat: Array) -> ClassifierParams:
    out = zeros_like_params(template)
    offset = 0
    for a in out.arrays():
        a[...] = flat[offset : offset + a.size].reshape(a.shape)
        offset += a.size
    if offset != flat.size:
        raise DimensionError(f"flat vector of size {flat.size} does not match template ({offset})")
    return out


@dataclass(frozen=True)
class Prediction:
    probs: Array
    predicted_class: int
    confidence: float


@dataclass
class EncoderCache:
    """Activations of one modality encoder; independent of any mask."""

    x: Array
    pre_hidden: Array
    hidden: Array
    latent: Array


@dataclass
class ForwardCache:
    """Intermediate activations needed by backward; keyed to one forward call."""

    mask: SubsetMask
    encoders: dict[int, EncoderCache]
    fused: Array
    probs: Array
    predicted_class: int


def encode_modality(params: ClassifierParams, modality: int, feats) -> EncoderCache:
    """Run one modality's encoder on a single feature vector."""
    if feats is None:
        raise DimensionError(f"modality {modality} is in the mask but has no features")
    x = np.asarray(feats, dtype=np.float64).reshape(1, -1)
    enc = params.encoders[modality]
    if x.shape[1] != enc.w1.shape[0]:
        raise DimensionError(
            f"modality {modality}: feature dim {x.shape[1]} != expected {enc.w1.shape[0]}"
        )
    h_pre = affine_forward(x, enc.w1, enc.b1)
    h = relu(h_pre)
    return EncoderCache(x=x, pre_hidden=h_pre, hidden=h, latent=affine_forward(h, enc.w2, enc.b2))


def classify_latents(
    params: ClassifierParams, latents: Sequence[Array]
) -> tuple[Array, Prediction]:
    """Mean-fuse the given latents and apply the linear head + softmax."""
    fused = latents[0].copy()
    for latent in latents[1:]:
        fused += latent
    fused /= len(latents)
    logits = affine_forward(fused, params.head_w, params.head_b)
    probs = softmax(logits[0])
    predicted = int(np.argmax(probs))
    return fused, Prediction(
        probs=probs, predicted_class=predicted, confidence=float(probs[predicted])
    )


def encoder_backward(
    params: ClassifierParams, modality: int, cache: EncoderCache, d_latent: Array
) -> tuple[Array, Array, Array, Array]:
    """Gradients (w1, b1, w2, b2) of one encoder given the latent gradient."""
    enc = params.encoders[modality]
    d_hidden, d_w2, d_b2 = affine_backward(cache.hidden, enc.w2, d_latent)
    d_pre = relu_backward(cache.pre_hidden, d_hidden)
    _, d_w1, d_b1 = affine_backward(cache.x, enc.w1, d_pre)
    return d_w1, d_b1, d_w2, d_b2


def forward(
    params: ClassifierParams,
    sample_features: Sequence[Array | None],
    mask: SubsetMask,
) -> tuple[Prediction, ForwardCache]:
    """Encode present modalities, fuse latents by their mean, classify."""
    mask.validate_for(params.num_modalities)
    if len(sample_features) != params.num_modalities:
        raise DimensionError(
            f"expected {params.num_modalities} modality vectors, got {len(sample_features)}"
        )
    encoders = {
        m: encode_modality(params, m, sample_features[m]) for m in mask.sorted_indices()
    }
    fused, prediction = classify_latents(params, [encoders[m].latent for m in sorted(encoders)])
    cache = ForwardCache(
        mask=mask,
        encoders=encoders,
        fused=fused,
        probs=prediction.probs,
        predicted_class=prediction.predicted_class,
    )
    return prediction, cache


def backward(
    params: ClassifierParams,
    cache: ForwardCache,
    loss_grad_wrt_logits: Array,
    mask: SubsetMask,
) -> ClassifierParams:
    """Exact gradients for one forward call; absent encoders get zero gradient."""
    if mask.present != cache.mask.present:
        raise StateError(f"mask {mask.format()} does not match cache mask {cache.mask.format()}")
    g_logits = np.asarray(loss_grad_wrt_logits, dtype=np.float64).reshape(1, -1)
    if g_logits.shape[1] != params.head_w.shape[1]:
        raise DimensionError(
            f"logits grad dim {g_logits.shape[1]} != {params.head_w.shape[1]} classes"
        )
    grads = zeros_like_params(params)
    d_fused, d_head_w, d_head_b = affine_backward(cache.fused, params.head_w, g_logits)
    grads.head_w[...] = d_head_w
    grads.head_b[...] = d_head_b
    d_latent = d_fused / len(mask)
    for m in mask.sorted_indices():
        genc = grads.encoders[m]
        d_w1, d_b1, d_w2, d_b2 = encoder_backward(params, m, cache.encoders[m], d_latent)
        genc.w1[...] = d_w1
        genc.b1[...] = d_b1
        genc.w2[...] = d_w2
        genc.b2[...] = d_b2
    return grads


def confidence_of(
    params: ClassifierParams,
    sample_features: Sequence[Array | None],
    mask: SubsetMask,
) -> tuple[float, int]:
    pred, _ = forward(params, sample_features, mask)
    return pred.confidence, pred.predicted_class


def save_checkpoint(path, spec: ModelSpec, params: ClassifierParams) -> None:
    """Write magic line, JSON header, then raw little-endian float64 arrays.

    Arrays follow in declaration order (per modality: w1, b1, w2, b2; then the
    head weights and bias), each C-contiguous. Round-trips are bit-exact.
    """
    header = {
        "spec": spec.to_json_dict(),
        "arrays": [list(a.shape) for a in params.arrays()],
        "dtype": "<f8",
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC.encode("ascii") + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelSpec, ClassifierParams]:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n").decode("ascii", errors="replace")
        if magic != CHECKPOINT_MAGIC:
            raise StateError(f"{path}: not a checkpoint file (magic {magic!r})")
        header = json.loads(fh.readline().decode("ascii"))
        spec = ModelSpec.from_json_dict(header["spec"])
        shapes = [tuple(s) for s in header["arrays"]]
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise StateError(f"{path}: truncated checkpoint")
            arrays.append(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
    expected = 4 * spec.num_modalities + 2
    if len(arrays) != expected:
        raise StateError(f"{path}: expected {expected} arrays, found {len(arrays)}")
    encoders = [
        EncoderParams(
            w1=arrays[4 * m],
            b1=arrays[4 * m + 1],
            w2=arrays[4 * m + 2],
            b2=arrays[4 * m + 3],
        )
        for m in range(spec.num_modalities)
    ]
    return spec, ClassifierParams(encoders=encoders, head_w=arrays[-2], head_b=arrays[-1])

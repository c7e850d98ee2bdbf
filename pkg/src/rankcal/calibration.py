"""Confidence-ranking calibration: mask chains, pair losses, VRR.

The guiding principle: a classifier's confidence should not increase when a
modality is removed. For nested masks T < S the confidence increment
ci = conf(S) - conf(T) should be non-negative; the fraction of sampled pairs
with ci < 0 is the violating ranking rate (VRR). Training adds a hinge
penalty max(0, conf(T) - conf(S)) over the pairs of a randomly sampled
removal chain, weighted by lambda on top of the classification loss.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    CapabilityError,
    ConfigError,
    DomainError,
    EmptyInputError,
    SpecError,
    StateError,
)
from .model import (
    ClassifierParams,
    Prediction,
    SubsetMask,
    classify_latents,
    encode_modality,
    encoder_backward,
    zeros_like_params,
)
from .numerics import Array, nll_loss, nll_loss_grad

REGULARIZER_VARIANTS = ("hinge", "difference", "none")

EXHAUSTIVE_MODALITY_LIMIT = 5

# Stream tag separating VRR-evaluation rngs from training rngs.
_VRR_STREAM = 3


@dataclass(frozen=True)
class MaskChain:
    """Nested masks from the full set down to a singleton, one removal per step."""

    masks: tuple[SubsetMask, ...]

    def __post_init__(self):
        if not self.masks:
            raise SpecError("chain must contain at least one mask")
        for smaller, larger in zip(self.masks[1:], self.masks):
            if not smaller.is_subset_of(larger) or len(larger) - len(smaller) != 1:
                raise SpecError(
                    f"chain step {larger.format()} -> {smaller.format()} must remove exactly one modality"
                )
        if len(self.masks[-1]) != 1:
            raise SpecError("chain must end at a single modality")

    @property
    def num_pairs(self) -> int:
        return len(self.masks) - 1


def sample_chain(num_modalities: int, rng: np.random.Generator) -> MaskChain:
    """Remove one uniformly chosen modality at a time until one remains."""
    if num_modalities < 1:
        raise SpecError("need at least one modality")
    remaining = list(range(num_modalities))
    masks = [SubsetMask.of(remaining)]
    while len(remaining) > 1:
        remaining.pop(int(rng.integers(len(remaining))))
        masks.append(SubsetMask.of(remaining))
    return MaskChain(masks=tuple(masks))


def enumerate_chain_pairs(chain: MaskChain) -> list[tuple[SubsetMask, SubsetMask]]:
    """(T, S) pairs along the chain, in removal order."""
    return [(chain.masks[i + 1], chain.masks[i]) for i in range(chain.num_pairs)]


def _check_confidence(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"{name} must be in [0, 1], got {value}")
    return value


def confidence_increment(conf_t: float, conf_s: float) -> float:
    """conf(S) - conf(T); negative means removing a modality raised confidence."""
    conf_t = _check_confidence(conf_t, "conf_t")
    conf_s = _check_confidence(conf_s, "conf_s")
    return conf_s - conf_t


def hinge_pair_loss(conf_t: float, conf_s: float) -> float:
    """max(0, conf_t - conf_s); zero loss and zero gradients at equality."""
    conf_t = _check_confidence(conf_t, "conf_t")
    conf_s = _check_confidence(conf_s, "conf_s")
    return max(0.0, conf_t - conf_s)


def hinge_pair_grads(conf_t: float, conf_s: float) -> tuple[float, float]:
    """(d/d conf_t, d/d conf_s); nonzero only where the hinge is active."""
    if conf_t > conf_s:
        return 1.0, -1.0
    return 0.0, 0.0


def difference_pair_loss(conf_t: float, conf_s: float) -> float:
    """conf_t - conf_s, penalized regardless of sign."""
    conf_t = _check_confidence(conf_t, "conf_t")
    conf_s = _check_confidence(conf_s, "conf_s")
    return conf_t - conf_s


def difference_pair_grads(conf_t: float, conf_s: float) -> tuple[float, float]:
    return 1.0, -1.0


@dataclass(frozen=True)
class RankingRecord:
    """One nested (T, S) pair with both confidences and the increment."""

    t_mask: SubsetMask
    s_mask: SubsetMask
    conf_t: float
    conf_s: float
    ci: float
    sample_id: int = -1


@dataclass
class ObjectiveResult:
    total_loss: float
    cls_loss: float
    reg_loss: float
    grads: ClassifierParams
    records: list[RankingRecord]
    full_prediction: Prediction


def _confidence_grad_wrt_logits(probs: Array, predicted: int) -> Array:
    # d max_k p_k / d z = p_c * (onehot_c - p), differentiating through the
    # argmax class fixed by this forward pass.
    grad = -probs[predicted] * probs
    grad[predicted] += probs[predicted]
    return grad


def sample_objective(
    params: ClassifierParams,
    sample_features: Sequence[Array | None],
    label: int,
    chain: MaskChain,
    variant: str = "hinge",
    lam: float = 0.0,
    skip_on_wrong_full: bool = True,
    detach_superset: bool = False,
) -> ObjectiveResult:
    """Composite per-sample objective over one removal chain.

    Classification loss averages the per-mask NLL over all masks of the chain
    (1/M factor); the ranking penalty sums the variant's pair loss over the
    chain's (T, S) pairs and is weighted by `lam`. With `skip_on_wrong_full`
    the penalty is dropped (loss and gradients) whenever the full-mask
    prediction is wrong. Gradients flow through both pair confidences unless
    `detach_superset` stops the conf(S) side.
    """
    if variant not in REGULARIZER_VARIANTS:
        raise ConfigError(f"unknown regularizer variant {variant!r}")
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    num_modalities = len(sample_features)
    if chain.masks[0].present != frozenset(range(num_modalities)):
        raise StateError(
            f"chain starts at {chain.masks[0].format()}, expected the full set of "
            f"{num_modalities} modalities"
        )

    # Encoder latents do not depend on the mask, so each modality is encoded
    # once and every mask in the chain reuses the cached latent.
    enc_caches = [encode_modality(params, m, sample_features[m]) for m in range(num_modalities)]
    preds: list[Prediction] = []
    fused_rows: list[Array] = []
    for mask in chain.masks:
        fused, pred = classify_latents(
            params, [enc_caches[m].latent for m in mask.sorted_indices()]
        )
        preds.append(pred)
        fused_rows.append(fused)

    n_masks = len(chain.masks)
    cls_loss = sum(nll_loss(p.probs, label) for p in preds) / n_masks
    logit_grads = [nll_loss_grad(p.probs, label) / n_masks for p in preds]

    records = []
    for i in range(chain.num_pairs):
        conf_s, conf_t = preds[i].confidence, preds[i + 1].confidence
        records.append(
            RankingRecord(
                t_mask=chain.masks[i + 1],
                s_mask=chain.masks[i],
                conf_t=conf_t,
                conf_s=conf_s,
                ci=confidence_increment(conf_t, conf_s),
            )
        )

    full_correct = preds[0].predicted_class == label
    reg_active = variant != "none" and not (skip_on_wrong_full and not full_correct)

    reg_loss = 0.0
    if reg_active:
        conf_grads = np.zeros(n_masks)
        for i in range(chain.num_pairs):
            conf_s, conf_t = preds[i].confidence, preds[i + 1].confidence
            if variant == "hinge":
                reg_loss += hinge_pair_loss(conf_t, conf_s)
                g_t, g_s = hinge_pair_grads(conf_t, conf_s)
            else:
                reg_loss += difference_pair_loss(conf_t, conf_s)
                g_t, g_s = difference_pair_grads(conf_t, conf_s)
            conf_grads[i + 1] += g_t
            if not detach_superset:
                conf_grads[i] += g_s
        if lam > 0.0:
            for i in range(n_masks):
                if conf_grads[i] != 0.0:
                    logit_grads[i] += (
                        lam
                        * conf_grads[i]
                        * _confidence_grad_wrt_logits(preds[i].probs, preds[i].predicted_class)
                    )

    # Backward, merging across masks: head gradients accumulate directly and
    # each modality collects its latent gradient over every mask containing it
    # before a single encoder backward pass (valid because the encoder map is
    # linear in its upstream gradient).
    grads = zeros_like_params(params)
    d_latents = [None] * num_modalities
    for i, mask in enumerate(chain.masks):
        g_row = logit_grads[i][None, :]
        grads.head_w += fused_rows[i].T @ g_row
        grads.head_b += logit_grads[i]
        d_latent = (g_row @ params.head_w.T) / len(mask)
        for m in mask.present:
            if d_latents[m] is None:
                d_latents[m] = d_latent.copy()
            else:
                d_latents[m] += d_latent
    for m in range(num_modalities):
        if d_latents[m] is None:
            continue
        genc = grads.encoders[m]
        d_w1, d_b1, d_w2, d_b2 = encoder_backward(params, m, enc_caches[m], d_latents[m])
        genc.w1[...] = d_w1
        genc.b1[...] = d_b1
        genc.w2[...] = d_w2
        genc.b2[...] = d_b2

    total_loss = cls_loss + lam * reg_loss
    return ObjectiveResult(
        total_loss=total_loss,
        cls_loss=cls_loss,
        reg_loss=reg_loss,
        grads=grads,
        records=records,
        full_prediction=preds[0],
    )


def compute_vrr(records: Sequence[RankingRecord]) -> float:
    """Fraction of records whose confidence increment is strictly negative."""
    if not records:
        raise EmptyInputError("no ranking records")
    violations = sum(1 for r in records if r.ci < 0.0)
    return violations / len(records)


def all_single_removal_pairs(num_modalities: int) -> list[tuple[SubsetMask, SubsetMask]]:
    """Every (T, S) with T = S minus one modality, over all S with |S| >= 2."""
    pairs = []
    for size in range(num_modalities, 1, -1):
        for s_indices in itertools.combinations(range(num_modalities), size):
            s_mask = SubsetMask.of(s_indices)
            for removed in s_indices:
                pairs.append((SubsetMask.of(set(s_indices) - {removed}), s_mask))
    return pairs


@dataclass
class VrrEvaluation:
    vrr: float
    records: list[RankingRecord]
    attribution: dict[int, int]


def evaluate_vrr(
    params: ClassifierParams,
    dataset,
    seed: int,
    mode: str = "sampled",
    repeats: int = 1,
) -> VrrEvaluation:
    """Dataset-level VRR.

    Sampled mode draws `repeats` removal chains per sample from rngs derived
    from (seed, repeat, sample index), mirroring training. Exhaustive mode
    enumerates every single-removal pair (allowed up to 5 modalities). The
    attribution counts, among violations where S is the full set, how often
    each removed modality caused the confidence increase.
    """
    if mode not in ("sampled", "exhaustive"):
        raise ConfigError(f"unknown VRR mode {mode!r}")
    if dataset.num_samples == 0:
        raise EmptyInputError("empty dataset")
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    num_modalities = dataset.num_modalities
    if mode == "exhaustive":
        if num_modalities > EXHAUSTIVE_MODALITY_LIMIT:
            raise CapabilityError(
                f"exhaustive enumeration capped at {EXHAUSTIVE_MODALITY_LIMIT} modalities, "
                f"got {num_modalities}"
            )
        template = all_single_removal_pairs(num_modalities)

    full_set = frozenset(range(num_modalities))
    records: list[RankingRecord] = []
    attribution = {m: 0 for m in range(num_modalities)}
    for i in range(dataset.num_samples):
        features = dataset.features(i)
        latents = [encode_modality(params, m, features[m]).latent for m in range(num_modalities)]
        conf_cache: dict[frozenset, float] = {}

        def conf_of(mask: SubsetMask) -> float:
            cached = conf_cache.get(mask.present)
            if cached is None:
                chosen = [latents[m] for m in mask.sorted_indices()]
                cached = classify_latents(params, chosen)[1].confidence
                conf_cache[mask.present] = cached
            return cached

        if mode == "sampled":
            pairs = []
            for r in range(repeats):
                rng = np.random.default_rng([seed, _VRR_STREAM, r, i])
                pairs.extend(enumerate_chain_pairs(sample_chain(num_modalities, rng)))
        else:
            pairs = template
        for t_mask, s_mask in pairs:
            conf_t, conf_s = conf_of(t_mask), conf_of(s_mask)
            ci = confidence_increment(conf_t, conf_s)
            records.append(
                RankingRecord(
                    t_mask=t_mask, s_mask=s_mask, conf_t=conf_t, conf_s=conf_s, ci=ci, sample_id=i
                )
            )
            if ci < 0.0 and s_mask.present == full_set:
                (removed,) = s_mask.present - t_mask.present
                attribution[removed] += 1
    return VrrEvaluation(vrr=compute_vrr(records), records=records, attribution=attribution)


def write_records_csv(path, records: Sequence[RankingRecord]) -> None:
    """CSV dump: sample_id,t_mask,s_mask,conf_t,conf_s,ci with 9-digit floats."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("sample_id,t_mask,s_mask,conf_t,conf_s,ci\n")
        for r in records:
            fh.write(
                f"{r.sample_id},{r.t_mask.format()},{r.s_mask.format()},"
                f"{r.conf_t:.9g},{r.conf_s:.9g},{r.ci:.9g}\n"
            )

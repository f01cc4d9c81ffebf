"""Channel-weighted feature distancing loss with clean-feature enlargement.

The attack objective combines two terms computed on the surrogate network:

* a primary feature term: the variance-weighted Chi-squared distance between
  the adversarial activation at a tapped intermediate layer and the clean
  activation at the same layer, the clean side enlarged by a factor so the
  optimization uniformly pushes adversarial feature values down;
* an auxiliary output term: cross-entropy between the adversarial logits and
  the clean prediction (the hard argmax; the true label is never used).

Channel weights are each channel's share of the total per-channel variance of
the clean feature map (population variance, normalized by position count).
The clean branch is a constant of the graph; no gradient reaches it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

DEFAULT_AUX_WEIGHT = 0.1      # eta
DEFAULT_ENLARGEMENT = 1.2     # lambda
DEFAULT_STABILIZER = 1e-6     # o


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean, population variance and normalized weight."""

    mean: np.ndarray
    variance: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if not (self.mean.shape == self.variance.shape == self.weights.shape):
            raise ShapeError("channel stats fields must share shape")


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    ``ce_only`` collapses the objective to the bare cross-entropy term; it
    exists so the full attack provably degenerates to the momentum baseline
    under an identity transform configuration.
    """

    aux_weight: float = DEFAULT_AUX_WEIGHT
    enlargement: float = DEFAULT_ENLARGEMENT
    stabilizer: float = DEFAULT_STABILIZER
    tap: int = 3
    ce_only: bool = False

    def __post_init__(self):
        if self.aux_weight < 0:
            raise ValueError(f"aux_weight must be >= 0, got {self.aux_weight}")
        if not self.enlargement > 0:
            raise ValueError(f"enlargement must be > 0, got {self.enlargement}")
        if not self.stabilizer > 0:
            raise ValueError(f"stabilizer must be > 0, got {self.stabilizer}")


def channel_weights(features) -> ChannelStats:
    """Stats of a clean (C, D) feature map; weights sum to 1.

    Falls back to uniform weights when every channel has zero variance.
    """
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    if data.ndim != 2:
        raise ShapeError(f"expected (channels, positions) features, got shape {data.shape}")
    mean = data.mean(axis=1)
    centered = data - mean[:, None]
    variance = (centered * centered).mean(axis=1)
    total = variance.sum()
    if total > 0:
        weights = variance / total
    else:
        weights = np.full(variance.shape, 1.0 / variance.size, dtype=data.dtype)
    return ChannelStats(mean, variance, weights)


def feature_distance(adv_features: Tensor, clean_features, stats: ChannelStats,
                     enlargement: float, stabilizer: float) -> Tensor:
    """Weighted Chi-squared distance between adversarial and enlarged clean features.

    Per channel k: M_k / N_k with M_k = sum_i (A_ki - lam*X_ki)^2 and
    N_k = sum_i (|A_ki| + |lam*X_ki| + o), combined as sum_k W_k * M_k / N_k.
    ``adv_features`` may be (C, D) or a batch (B, C, D); batches return the
    mean of per-example distances.  The clean side is a constant.
    """
    clean = clean_features.data if isinstance(clean_features, Tensor) else np.asarray(clean_features)
    adv = adv_features if isinstance(adv_features, Tensor) else Tensor(adv_features)
    batched = adv.data.ndim == 3
    if not batched and adv.data.ndim != 2:
        raise ShapeError(f"adversarial features must be (B, C, D) or (C, D), got {adv.shape}")
    feat_shape = adv.shape[1:] if batched else adv.shape
    if tuple(clean.shape) != tuple(feat_shape):
        raise ShapeError(f"feature shapes differ: {feat_shape} vs {clean.shape}")
    if stats.weights.shape != (feat_shape[0],):
        raise ShapeError("stats do not match the feature channel count")

    dtype = adv.dtype
    d = feat_shape[1]
    enlarged = (clean * enlargement).astype(dtype)
    weights = stats.weights.astype(dtype)
    if batched:
        b = adv.shape[0]
        enlarged = np.broadcast_to(enlarged, (b,) + enlarged.shape)
        weights = np.broadcast_to(weights, (b, weights.size))

    diff = ad.sub(adv, Tensor(np.ascontiguousarray(enlarged)))
    m = ad.sum(ad.square(diff), axis=-1)                      # (..., C)
    n_partial = ad.add(
        ad.sum(ad.abs(adv), axis=-1),
        Tensor(np.ascontiguousarray(np.absolute(enlarged).sum(axis=-1))),
    )
    # o appears once per position inside N_k: fold D*o into the stabilizer
    per_channel = ad.div_stable(m, n_partial, float(stabilizer) * d)
    weighted = ad.sum(ad.mul(Tensor(np.ascontiguousarray(weights)), per_channel), axis=-1)
    return ad.mean(weighted) if batched else weighted


def auxiliary_loss(adv_logits: Tensor, clean_logits) -> Tensor:
    """Cross-entropy of adversarial logits against the clean hard prediction.

    ``clean_logits`` may be (K,) or (B, K); a single clean prediction is
    shared by every adversarial row.  Gradient flows only through the
    adversarial side.
    """
    clean = clean_logits.data if isinstance(clean_logits, Tensor) else np.asarray(clean_logits)
    adv = adv_logits if isinstance(adv_logits, Tensor) else Tensor(adv_logits)
    if adv.data.ndim != 2:
        raise ShapeError(f"adversarial logits must be (B, K), got {adv.shape}")
    b, k = adv.shape
    if k < 2:
        raise ShapeError("need at least two classes")
    if clean.ndim == 1:
        targets = np.full(b, int(clean.argmax()))
    elif clean.shape == (b, k):
        targets = clean.argmax(axis=1)
    else:
        raise ShapeError(f"clean logits shape {clean.shape} incompatible with ({b}, {k})")
    return ad.softmax_cross_entropy(adv, targets)


@dataclass(frozen=True)
class CleanReference:
    """Clean-branch quantities computed once per example and reused per copy."""

    logits: np.ndarray        # (K,)
    prediction: int
    features: np.ndarray      # (C_l, D_l)
    stats: ChannelStats


def clean_reference(model, x_clean, cfg: LossConfig) -> CleanReference:
    """Run the detached clean forward pass and freeze its stats."""
    data = x_clean.data if isinstance(x_clean, Tensor) else np.asarray(x_clean)
    if data.ndim == 3:
        data = data[None]
    logits, features = model.forward_with_tap(Tensor(data), tap=cfg.tap)
    logits = logits.data[0]
    features = features.data[0]
    return CleanReference(logits, int(logits.argmax()), features, channel_weights(features))


def loss_from_reference(adv_logits: Tensor, adv_features: Tensor,
                        ref: CleanReference, cfg: LossConfig):
    """(total, feature term value, auxiliary term value) for a batch of copies."""
    aux = auxiliary_loss(adv_logits, ref.logits)
    if cfg.ce_only:
        return aux, 0.0, float(aux.data)
    dist = feature_distance(adv_features, ref.features, ref.stats,
                            cfg.enlargement, cfg.stabilizer)
    total = ad.add(dist, ad.scalar_mul(aux, cfg.aux_weight))
    return total, float(dist.data), float(aux.data)


def total_loss(x_adv, x_clean, model, cfg: LossConfig) -> Tensor:
    """Full objective for one adversarial input against its clean example.

    The clean branch is recomputed here and detached; inside the attack loop
    the per-example :func:`clean_reference` is computed once and reused.
    """
    ref = clean_reference(model, x_clean, cfg)
    adv = x_adv if isinstance(x_adv, Tensor) else Tensor(x_adv)
    if adv.data.ndim == 3:
        adv = ad.reshape(adv, (1,) + tuple(adv.shape))
    logits, features = model.forward_with_tap(adv, tap=cfg.tap)
    total, _, _ = loss_from_reference(logits, features, ref, cfg)
    return total

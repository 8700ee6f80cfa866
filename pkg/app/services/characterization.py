"""
Neoplastic vs non-neoplastic characterization with class-weighted training,
plus Gram-matrix texture spectra of the deepest feature maps.

The spectrum is a diagnostic attached to each finding; the label comes from
the classifier alone.
"""
from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np

from app.errors import DatasetError
from app.models import ClassSupport, GramLayerSpectrum, GramSpectrum, PhantomSample
from app.nn.linalg import jacobi_eigen
from app.nn.network import LossKind, NetworkSpec, Params, forward, init_params
from app.nn.rng import Rng
from app.nn.train import TrainConfig, TrainingResult, fit
from app.services.recognition import build_toy_cnn, label_from_probs

logger = logging.getLogger(__name__)

GRAM_LAYERS = ("relu2", "relu3")


def build_characterizer(image_size: int = 64) -> NetworkSpec:
    return build_toy_cnn(image_size, loss=LossKind.WEIGHTED_CROSS_ENTROPY)


def characterization_arrays(samples: Sequence[PhantomSample]) -> tuple[np.ndarray, np.ndarray]:
    """Polyp samples only; class 1 is neoplastic."""
    polyps = [s for s in samples if s.has_polyp]
    if not polyps:
        return np.zeros((0,)), np.zeros((0,), dtype=np.int64)
    return np.stack([s.image for s in polyps]), np.asarray([int(s.neoplastic) for s in polyps], dtype=np.int64)


def class_weights(labels: Sequence[int], n_classes: int = 2) -> list[float]:
    """Inverse class frequency, N / (K * n_c). Every class must be present."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    if np.any(counts == 0):
        raise DatasetError(f"Every class needs at least one sample, got counts {counts.tolist()}")
    return [len(labels) / (n_classes * int(c)) for c in counts]


def train_characterizer(net: NetworkSpec, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                        val: Optional[tuple[np.ndarray, np.ndarray]] = None,
                        weights: Optional[Sequence[float]] = None) -> tuple[TrainingResult, list[float]]:
    weights = list(weights) if weights is not None else class_weights(labels)
    if any(w <= 0 for w in weights):
        raise ValueError(f"Class weights must be positive, got {weights}")
    logger.info(f"Training characterizer on {len(labels)} images with class weights {weights}")
    params = init_params(net, Rng(cfg.seed).spawn("init"))
    return fit(net, params, (images, labels), cfg, val=val, class_weights=weights), weights


def gram_matrix(features: np.ndarray) -> np.ndarray:
    """Inner products of the vectorized maps of a (C, H, W) or (C, P) feature stack."""
    flat = np.asarray(features, dtype=np.float64).reshape(features.shape[0], -1)
    if flat.shape[0] == 0:
        raise ValueError("gram_matrix needs at least one feature map")
    return flat @ flat.T


def spectrum(gram: np.ndarray) -> np.ndarray:
    """Eigenvalues of a Gram matrix, descending."""
    values, _ = jacobi_eigen(gram)
    return values


def layer_spectrum(layer: str, gram: np.ndarray) -> GramLayerSpectrum:
    values = spectrum(gram)
    bulk = values[1:]
    trace = float(np.sum(values))
    return GramLayerSpectrum(
        layer=layer,
        gram=gram.tolist(),
        eigenvalues=values.tolist(),
        largest=float(values[0]),
        bulk_mean=float(bulk.mean()) if len(bulk) else 0.0,
        bulk_median=float(np.median(bulk)) if len(bulk) else 0.0,
        leading_mass=float(values[0]) / trace if trace > 0 else 0.0,
    )


def support_overlap(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Intersection-over-union of the [min, max] supports of two samples; 0 when
    the supports are separated.
    """
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"support_overlap needs at least 2 values per class, got {len(a)} and {len(b)}")
    lo_a, hi_a, lo_b, hi_b = min(a), max(a), min(b), max(b)
    union = max(hi_a, hi_b) - min(lo_a, lo_b)
    inter = max(0.0, min(hi_a, hi_b) - max(lo_a, lo_b))
    if union == 0:
        return 1.0
    return inter / union


def _restrict(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zeroes feature pixels outside the mask, downsampled to the feature resolution by block max."""
    h, w = features.shape[-2:]
    fh, fw = mask.shape[0] // h, mask.shape[1] // w
    small = np.asarray(mask, dtype=bool).reshape(h, fh, w, fw).any(axis=(1, 3))
    return features * small[None, :, :]


def gram_spectrum(net: NetworkSpec, params: Params, image: np.ndarray, layers: Sequence[str] = GRAM_LAYERS,
                  mask: Optional[np.ndarray] = None) -> GramSpectrum:
    _, cache = forward(net, params, np.asarray(image)[None])
    return _spectrum_from_cache(cache.activations, layers, mask)


def _spectrum_from_cache(activations: dict, layers: Sequence[str], mask: Optional[np.ndarray]) -> GramSpectrum:
    entries = []
    for layer in layers:
        features = activations[layer][0]
        if mask is not None:
            features = _restrict(features, mask)
        entries.append(layer_spectrum(layer, gram_matrix(features)))
    return GramSpectrum(layers=entries)


def characterize(net: NetworkSpec, params: Params, image: np.ndarray, layers: Sequence[str] = GRAM_LAYERS,
                 mask: Optional[np.ndarray] = None,
                 with_spectrum: bool = True) -> tuple[bool, float, Optional[GramSpectrum]]:
    """(neoplastic, confidence, spectrum). Ties go to non-neoplastic."""
    probs, cache = forward(net, params, np.asarray(image)[None])
    index, confidence = label_from_probs(probs[0])
    diagnostic = _spectrum_from_cache(cache.activations, layers, mask) if with_spectrum else None
    return bool(index == 1), confidence, diagnostic


def class_supports(largest: dict[str, list[tuple[bool, float]]]) -> list[ClassSupport]:
    """
    Per layer, the [min, max] support of the largest eigenvalue for each class
    and their overlap. `largest` maps layer -> [(neoplastic, value), ...].
    """
    supports = []
    for layer, entries in largest.items():
        neo = [v for flag, v in entries if flag]
        non = [v for flag, v in entries if not flag]
        if len(neo) < 2 or len(non) < 2:
            logger.warning(f"Layer {layer}: too few samples per class for a support overlap")
            continue
        supports.append(ClassSupport(
            layer=layer,
            neoplastic=(min(neo), max(neo)),
            non_neoplastic=(min(non), max(non)),
            overlap=support_overlap(neo, non),
        ))
    return supports

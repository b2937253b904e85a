"""
Evaluation metrics: PSNR, SSIM, landmark distances and a Frechet distance
over pluggable image features.

FID values computed with the bundled feature extractors are not comparable
to Inception-based FID scores reported elsewhere.
"""
import logging
import pathlib
import warnings
from typing import Callable
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import linalg
from scipy import ndimage

from talkfast.exceptions import ContractError
from talkfast.exceptions import ValidationError
from talkfast.landmarks import MOUTH_INDICES

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
IMAGE_SIZE = 128
LUMA = np.array([0.299, 0.587, 0.114])

ArrayLike = Union[np.ndarray, torch.Tensor]


class DegenerateCovarianceWarning(UserWarning):
    """A feature covariance is singular; the Frechet distance was computed with clipping."""


class MetricReport(NamedTuple):
    """Averaged evaluation results.

    Args:
        psnr (float): dB, capped at 100.
        ssim (float): Mean structural similarity in [-1, 1].
        lmd (Optional[float]): Mean landmark distance over all points, pixels.
        m_lmd (Optional[float]): Mean landmark distance over the mouth points, pixels.
        fid (Optional[float]): Frechet distance of the configured features.
        samples (int): Number of evaluated sequences.
        fid_degenerate (bool): True if a covariance was singular.
    """

    psnr: float
    ssim: float
    lmd: Optional[float] = None
    m_lmd: Optional[float] = None
    fid: Optional[float] = None
    samples: int = 0
    fid_degenerate: bool = False

    def to_dict(self) -> Dict[str, Union[float, int, bool, None]]:
        return dict(self._asdict())


def _as_array(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")


def _images(x: np.ndarray) -> np.ndarray:
    """Flattens leading dimensions: `[N, H, W, C]` for color input, `[N, H, W]` for grayscale."""
    if x.ndim >= 3 and x.shape[-1] == 3:
        return x.reshape(-1, *x.shape[-3:])
    if x.ndim < 2:
        raise ValidationError(f"expected an image, got shape {x.shape}")
    return x.reshape(-1, *x.shape[-2:])


def to_luma(images: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of `[..., 3]` images; grayscale input passes through."""
    if images.ndim >= 3 and images.shape[-1] == 3:
        return images @ LUMA
    return images


def psnr(a: ArrayLike, b: ArrayLike, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], averaged over images.

    Accepts a single image or any stack of images (`[..., H, W]` or
    `[..., H, W, 3]`). Identical images score `cap`.

    Raises:
        ContractError: If the inputs differ in shape.
    """
    a, b = _as_array(a), _as_array(b)
    _check_same_shape(a, b)
    a, b = _images(a), _images(b)
    mse = ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        values = np.where(mse > 0, 10.0 * np.log10(1.0 / np.maximum(mse, 1e-300)), cap)
    return float(np.minimum(values, cap).mean())


def _gaussian_taps(window: int, sigma: float) -> np.ndarray:
    radius = window // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return taps / taps.sum()


def _local_mean(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    radius = len(taps) // 2
    out = ndimage.correlate1d(x, taps, axis=-1, mode="constant")
    out = ndimage.correlate1d(out, taps, axis=-2, mode="constant")
    # keep only windows that lie fully inside the image
    return out[..., radius:-radius or None, radius:-radius or None]


def ssim(
    a: ArrayLike,
    b: ArrayLike,
    window: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
    data_range: float = 1.0,
) -> float:
    """Gaussian-weighted structural similarity on luma, averaged over windows and images.

    Raises:
        ContractError: If the inputs differ in shape.
        ValidationError: If an image is smaller than the window or the window is even.
    """
    a, b = _as_array(a), _as_array(b)
    _check_same_shape(a, b)
    if window < 1 or window % 2 == 0:
        raise ValidationError(f"SSIM window must be a positive odd number, got {window}")
    a, b = to_luma(_images(a)), to_luma(_images(b))
    if min(a.shape[-2:]) < window:
        raise ValidationError(f"image {a.shape[-2:]} is smaller than the {window}x{window} window")

    taps = _gaussian_taps(window, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _local_mean(a, taps), _local_mean(b, taps)
    var_a = _local_mean(a * a, taps) - mu_a * mu_a
    var_b = _local_mean(b * b, taps) - mu_b * mu_b
    cov = _local_mean(a * b, taps) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    per_image = (num / den).reshape(a.shape[0], -1).mean(axis=1)
    return float(per_image.mean())


def lmd(
    pred: ArrayLike,
    gt: ArrayLike,
    subset: Optional[Sequence[int]] = None,
    image_size: int = IMAGE_SIZE,
) -> float:
    """Mean Euclidean landmark distance in pixels.

    Normalized coordinates are scaled by `image_size - 1`, the same pixel
    grid the landmarks are rasterized on.

    Args:
        pred (ArrayLike): `[..., F, P, 2]` predicted landmarks in [0, 1].
        gt (ArrayLike): Ground truth shaped like `pred`.
        subset (Optional[Sequence[int]], optional): Point indices to average over.
        image_size (int, optional): Pixel grid side. Defaults to 128.

    Raises:
        ContractError: If frame or point counts differ.
    """
    pred, gt = _as_array(pred), _as_array(gt)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ContractError(f"landmark shapes differ: {pred.shape} vs {gt.shape}")
    if subset is not None:
        subset = list(subset)
        if any(i < 0 or i >= pred.shape[-2] for i in subset):
            raise ValidationError(f"subset indices must lie in [0, {pred.shape[-2]})")
        pred, gt = pred[..., subset, :], gt[..., subset, :]
    distance = np.linalg.norm((pred - gt) * (image_size - 1), axis=-1)
    return float(distance.mean())


def m_lmd(
    pred: ArrayLike,
    gt: ArrayLike,
    mouth_indices: Sequence[int] = MOUTH_INDICES,
    image_size: int = IMAGE_SIZE,
) -> float:
    """Landmark distance restricted to the mouth points."""
    return lmd(pred, gt, mouth_indices, image_size)


def frechet_distance(
    mu_a: np.ndarray, sigma_a: np.ndarray, mu_b: np.ndarray, sigma_b: np.ndarray
) -> float:
    """`|mu_a - mu_b|^2 + tr(sigma_a + sigma_b - 2 (sigma_a sigma_b)^(1/2))`.

    The trace of the square root is taken from the eigenvalues of the
    symmetric `sqrt(sigma_a) sigma_b sqrt(sigma_a)`, with negative eigenvalues
    clipped to 0.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    sigma_a = np.atleast_2d(sigma_a).astype(np.float64)
    sigma_b = np.atleast_2d(sigma_b).astype(np.float64)
    if mu_a.shape != mu_b.shape or sigma_a.shape != sigma_b.shape:
        raise ContractError("feature statistics differ in dimension")

    evals, evecs = linalg.eigh(sigma_a)
    sqrt_a = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    middle = sqrt_a @ sigma_b @ sqrt_a
    middle = (middle + middle.T) / 2.0
    trace_sqrt = float(np.sqrt(np.clip(linalg.eigvalsh(middle), 0.0, None)).sum())

    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_sqrt)
    return max(value, 0.0)


def _is_degenerate(sigma: np.ndarray, tol: float = 1e-10) -> bool:
    evals = linalg.eigvalsh(sigma)
    return bool(evals.min() <= tol * max(evals.max(), 1.0))


def fid(features_a: ArrayLike, features_b: ArrayLike, return_flag: bool = False):
    """Frechet distance between two `[N, D]` feature sets.

    A singular covariance (typically `N <= D`) is logged, warned about with
    `DegenerateCovarianceWarning` and the clipped computation proceeds.

    Returns:
        float, or `(float, bool)` with the degenerate flag if `return_flag`.
    """
    a, b = _as_array(features_a), _as_array(features_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError(f"feature matrices must be [N, D] with equal D: {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValidationError("FID needs at least two feature vectors per set")
    sigma_a = np.atleast_2d(np.cov(a, rowvar=False))
    sigma_b = np.atleast_2d(np.cov(b, rowvar=False))
    degenerate = _is_degenerate(sigma_a) or _is_degenerate(sigma_b)
    if degenerate:
        logger.warning(
            "degenerate feature covariance (N=%d/%d, D=%d), FID uses clipped eigenvalues",
            a.shape[0], b.shape[0], a.shape[1],
        )
        warnings.warn(
            "degenerate feature covariance, FID uses clipped eigenvalues",
            DegenerateCovarianceWarning,
            stacklevel=2,
        )
    value = frechet_distance(a.mean(axis=0), sigma_a, b.mean(axis=0), sigma_b)
    return (value, degenerate) if return_flag else value


FeatureExtractor = Callable[[np.ndarray], np.ndarray]
_FEATURE_EXTRACTORS: Dict[str, FeatureExtractor] = {}


def register_feature_extractor(name: str) -> Callable:
    """Registers an `[N, H, W, 3] -> [N, D]` feature extractor used by `evaluate`."""

    def inner(extractor: FeatureExtractor) -> FeatureExtractor:
        _FEATURE_EXTRACTORS[name] = extractor
        return extractor

    return inner


def available_feature_extractors() -> List[str]:
    return sorted(_FEATURE_EXTRACTORS)


def get_feature_extractor(name: str) -> FeatureExtractor:
    if name not in _FEATURE_EXTRACTORS:
        raise ValidationError(
            f"Unknown feature extractor: {name}. Only supports one of: {available_feature_extractors()}"
        )
    return _FEATURE_EXTRACTORS[name]


@register_feature_extractor("pixels")
def pixel_features(images: np.ndarray, size: int = 16) -> np.ndarray:
    """Area-downsampled `size x size` luma thumbnails, flattened."""
    luma = torch.as_tensor(to_luma(_images(_as_array(images))))
    thumbs = F.adaptive_avg_pool2d(luma.unsqueeze(1), (size, size))
    return thumbs.flatten(1).numpy()


def evaluate(
    pred_frames: Sequence[ArrayLike],
    gt_frames: Sequence[ArrayLike],
    pred_landmarks: Optional[Sequence[ArrayLike]] = None,
    gt_landmarks: Optional[Sequence[ArrayLike]] = None,
    mouth_indices: Sequence[int] = MOUTH_INDICES,
    image_size: int = IMAGE_SIZE,
    feature_extractor: Optional[str] = None,
) -> MetricReport:
    """Scores each sequence separately and averages over sequences.

    Args:
        pred_frames (Sequence[ArrayLike]): Per-sample `[F, H, W, 3]` frames in [0, 1].
        gt_frames (Sequence[ArrayLike]): Matching ground truth frames.
        pred_landmarks (Optional[Sequence[ArrayLike]], optional): Per-sample `[F, P, 2]` landmarks.
        gt_landmarks (Optional[Sequence[ArrayLike]], optional): Matching ground truth landmarks.
        mouth_indices (Sequence[int], optional): Points used by M-LMD.
        image_size (int, optional): Pixel scale of the landmark distances.
        feature_extractor (Optional[str], optional): Registered extractor for FID; skipped if None.

    Raises:
        ContractError: If the sample counts differ.
    """
    if len(pred_frames) != len(gt_frames):
        raise ContractError(f"{len(pred_frames)} predicted vs {len(gt_frames)} ground truth samples")
    if not len(pred_frames):
        raise ValidationError("nothing to evaluate")

    psnrs = [psnr(p, g) for p, g in zip(pred_frames, gt_frames)]
    ssims = [ssim(p, g) for p, g in zip(pred_frames, gt_frames)]
    report = {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))}

    if pred_landmarks is not None and gt_landmarks is not None:
        if len(pred_landmarks) != len(gt_landmarks):
            raise ContractError("landmark sample counts differ")
        report["lmd"] = float(
            np.mean([lmd(p, g, image_size=image_size) for p, g in zip(pred_landmarks, gt_landmarks)])
        )
        report["m_lmd"] = float(
            np.mean(
                [m_lmd(p, g, mouth_indices, image_size) for p, g in zip(pred_landmarks, gt_landmarks)]
            )
        )

    if feature_extractor is not None:
        extractor = get_feature_extractor(feature_extractor)
        feats_pred = np.concatenate([extractor(_as_array(p)) for p in pred_frames])
        feats_gt = np.concatenate([extractor(_as_array(g)) for g in gt_frames])
        report["fid"], report["fid_degenerate"] = fid(feats_pred, feats_gt, return_flag=True)

    result = MetricReport(samples=len(pred_frames), **report)
    logger.info("evaluated %d samples: %s", result.samples, result.to_dict())
    return result


def load_frames(directory: Union[str, pathlib.Path]) -> np.ndarray:
    """Reads a numbered PNG frame directory into `[F, H, W, 3]` floats in [0, 1].

    Raises:
        ValidationError: If the directory holds no PNG frames.
    """
    paths = sorted(pathlib.Path(directory).glob("*.png"))
    if not paths:
        raise ValidationError(f"no PNG frames in {directory}")
    frames = []
    for path in paths:
        with Image.open(path) as image:
            frames.append(np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0)
    return np.stack(frames)


def load_sequences(directory: Union[str, pathlib.Path]) -> Dict[str, np.ndarray]:
    """Loads one frame directory, or every frame subdirectory keyed by name."""
    directory = pathlib.Path(directory)
    if any(directory.glob("*.png")):
        return {directory.name: load_frames(directory)}
    return {
        sub.name: load_frames(sub)
        for sub in sorted(p for p in directory.iterdir() if p.is_dir())
    }


def evaluate_dirs(
    pred_dir: Union[str, pathlib.Path],
    gt_dir: Union[str, pathlib.Path],
    landmarks_file: Optional[Union[str, pathlib.Path]] = None,
    mouth_indices: Sequence[int] = MOUTH_INDICES,
    image_size: int = IMAGE_SIZE,
    feature_extractor: Optional[str] = "pixels",
) -> MetricReport:
    """`evaluate` over frame directories.

    Sequences are paired by sorted order. `landmarks_file` is an `.npz`
    archive with `pred` and `gt` arrays of shape `[N, F, P, 2]` (or `[F, P, 2]`).
    FID is skipped when fewer than two frames are available per side.
    """
    pred = list(load_sequences(pred_dir).values())
    gt = list(load_sequences(gt_dir).values())
    pred_lm = gt_lm = None
    if landmarks_file is not None:
        with np.load(landmarks_file) as archive:
            pred_lm, gt_lm = archive["pred"], archive["gt"]
        if pred_lm.ndim == 3:
            pred_lm, gt_lm = pred_lm[None], gt_lm[None]
    if feature_extractor is not None and min(sum(len(p) for p in pred), sum(len(g) for g in gt)) < 2:
        feature_extractor = None
    return evaluate(pred, gt, pred_lm, gt_lm, mouth_indices, image_size, feature_extractor)

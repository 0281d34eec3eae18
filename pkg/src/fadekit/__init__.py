"""fadekit: noise-fading image protection with a full evaluation harness."""

from .tensor import Tensor, backward
from .protect import (
    MaskSchedule,
    ProtectConfig,
    ProtectionResult,
    gen_mask_schedule,
    pixelfade_protect,
    sample_noise_target,
)
from .metrics import ImagePair, RankedRetrieval, ad_statistic, cmc_rank_k, m_inp, mean_ap, psnr, ssim
from .nets import FeatureExtractor, Optimizer, RecoveryNet, embed, recover, train_extractor, train_recovery
from .synthdata import DatasetSplits, gen_dataset, read_image, write_image

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "MaskSchedule",
    "ProtectConfig",
    "ProtectionResult",
    "gen_mask_schedule",
    "pixelfade_protect",
    "sample_noise_target",
    "ImagePair",
    "RankedRetrieval",
    "ad_statistic",
    "cmc_rank_k",
    "m_inp",
    "mean_ap",
    "psnr",
    "ssim",
    "FeatureExtractor",
    "Optimizer",
    "RecoveryNet",
    "embed",
    "recover",
    "train_extractor",
    "train_recovery",
    "DatasetSplits",
    "gen_dataset",
    "read_image",
    "write_image",
    "__version__",
]

"""Loss, optimizer, synthetic data, metrics and the training/evaluation loops."""
from .data import BlurSpec, Dataset, Pair, builtin_images, make_dataset, sample_blur_spec, synth_blur
from .losses import loss_terms, perceptual_proxy, total_loss
from .loop import EvalResult, TrainConfig, TrainResult, evaluate, format_metric_log, predict, train_loop
from .metrics import psnr, ssim
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "BlurSpec", "Dataset", "EvalResult", "Pair", "TrainConfig", "TrainResult",
    "adam_step", "builtin_images", "evaluate", "format_metric_log", "loss_terms", "make_dataset",
    "perceptual_proxy", "predict", "psnr", "sample_blur_spec", "ssim", "synth_blur",
    "total_loss", "train_loop",
]

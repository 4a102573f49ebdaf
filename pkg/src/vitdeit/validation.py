"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ConfigError, InputError


def check_images(X, image_size=None, channels=None):
    """Validate a batch of images as finite float64 of shape (n, H, W, C)."""
    X = check_array(np.asarray(X), allow_nd=True, dtype=np.float64, ensure_all_finite=True,
                    ensure_2d=False)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise InputError(f"expected images shaped (n, H, W, C), got {X.shape}")
    if image_size is not None and X.shape[1:3] != (image_size, image_size):
        raise ConfigError(f"images are {X.shape[1]}x{X.shape[2]}, model expects {image_size}x{image_size}")
    if channels is not None and X.shape[3] != channels:
        raise ConfigError(f"images have {X.shape[3]} channels, model expects {channels}")
    return X


def check_labels(y, n_samples):
    y = np.asarray(y)
    if y.ndim != 1:
        y = y.reshape(-1)
    if len(y) != n_samples:
        raise InputError(f"{n_samples} samples but {len(y)} labels")
    return y

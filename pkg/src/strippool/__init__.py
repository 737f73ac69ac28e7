"""Strip pooling and mixed pooling segmentation networks on a small numpy autodiff core."""

__version__ = "0.1.0"

from .tensor import ConfigError, Node  # noqa: E402,F401

"""Static-object re-identification toolkit: geometric curation of instance
labels from 3D annotations, contextual patch generation, supervised
contrastive training of a projection head, and stratified retrieval
evaluation, with a synthetic generator for end-to-end testing."""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]

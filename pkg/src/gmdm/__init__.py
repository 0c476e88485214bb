"""Patch priors built from products of one-dimensional GMM experts whose
variances grow with diffusion time."""

from gmdm.filter_bank import FilterBank, init_filters, orthogonalize
from gmdm.gmm_core import Expert, MeanGrid, std_from_time, time_from_std
from gmdm.patch_model import PatchModel, dense_oracle

__all__ = [
    "Expert",
    "FilterBank",
    "MeanGrid",
    "PatchModel",
    "dense_oracle",
    "init_filters",
    "orthogonalize",
    "std_from_time",
    "time_from_std",
]
__version__ = "0.1.0"

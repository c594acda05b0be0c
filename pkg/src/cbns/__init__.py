"""Censoring by noisy sampling for point-cloud datasets.

Learns a censoring transformation (invariant point sampler + noise distorter)
adversarially against proxy user and attacker classifiers, releases censored
datasets, and scores the privacy-utility trade-off with a fine-tuned offline
attacker and normalized-hypervolume Pareto analysis.
"""

from .core import (Dataset, LabeledSample, PointCloud, RandomStream,
                   normalize_cloud, split_dataset)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "LabeledSample",
    "PointCloud",
    "RandomStream",
    "normalize_cloud",
    "split_dataset",
    "__version__",
]

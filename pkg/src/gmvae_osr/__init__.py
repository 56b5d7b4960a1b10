"""Open-set recognition on tabular data with two pipelines.

* a Gaussian-mixture VAE whose class centroids feed an uncertainty ratio
  rejection rule (``gmvae`` + ``decision``), and
* an ii-loss embedding network with an outlier-score rule (``iiloss``),

plus the data preparation (``data``), evaluation protocol (``metrics``,
``evaluation``) and experiment orchestration (``pipeline``, ``cli``).
"""

__version__ = "0.1.0"

from .geometry import NOVEL, CentroidSet

__all__ = ["NOVEL", "CentroidSet", "__version__"]

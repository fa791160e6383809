"""Open-set dynamic diagnosis.

An autoencoder-regularized classifier is calibrated for open-set recognition
with multi-center Weibull tail models, and a recurrent recommender trained on
strategy-pair rewards chooses which examinations to request next.
"""

from ._kernels import BACKEND
from .domain import ExamKind, Label

__version__ = "0.1.0"

__all__ = ["BACKEND", "ExamKind", "Label", "__version__"]

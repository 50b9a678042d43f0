"""Deep constraint completion and correction for learning to optimize.

Networks predict a subset of the decision variables, the rest is filled in
by solving the equality constraints, and a few unrolled gradient steps push
the result back inside the inequality constraints.
"""
from .engine import Dc3Config, Variant, default_config, evaluate, predict, train
from .errors import Dc3Error
from .problems import QpFamily, generate_qp_family, sample_instances

__version__ = "0.1.0"

__all__ = [
    "Dc3Config", "Dc3Error", "QpFamily", "Variant", "default_config", "evaluate",
    "generate_qp_family", "predict", "sample_instances", "train",
]

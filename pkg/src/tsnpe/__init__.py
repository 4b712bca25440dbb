"""Truncated sequential neural posterior estimation.

Subpackages: :mod:`tsnpe.ndcore` (networks and optimizer), :mod:`tsnpe.density`
(conditional density estimators), :mod:`tsnpe.tasks` (simulators, priors and
reference posteriors), :mod:`tsnpe.truncation` (truncated proposals and their
samplers), :mod:`tsnpe.engine` (round loop and baselines),
:mod:`tsnpe.diagnostics` (coverage and two-sample tests) and :mod:`tsnpe.cli`.
"""

from .density import TrainConfig, build_estimator, fit
from .engine import RunConfig, run, run_apt, run_npe, run_tsnpe
from .tasks import TASK_NAMES, make_task
from .truncation import TruncatedProposal, sample_truncated

__version__ = "0.1.0"

__all__ = ["RunConfig", "TASK_NAMES", "TrainConfig", "TruncatedProposal", "build_estimator", "fit",
           "make_task", "run", "run_apt", "run_npe", "run_tsnpe", "sample_truncated"]

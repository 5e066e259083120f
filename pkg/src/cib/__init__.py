"""Information-bottleneck training for a two-stream multimodal QA model.

Subpackages:

* :mod:`cib.tensor` - float64 tensors with reverse-mode autodiff
* :mod:`cib.optim` - momentum SGD and the warmup/decay learning-rate schedule
* :mod:`cib.density` - diagonal-Gaussian conditionals (log-density, KL, pooling)
* :mod:`cib.estimators` - sample-based MI estimators plus exact analytic oracles
* :mod:`cib.objective` - the regularized training loss and its provable bound variants
* :mod:`cib.task` - deterministic synthetic multimodal QA generator and perturbations
* :mod:`cib.model` - the toy two-stream model and its training loop
* :mod:`cib.metrics` - consensus score, prediction flips, accuracy-gap reports
* :mod:`cib.experiments` - config-driven sweep/ablation runner
* :mod:`cib.cli` - the ``cib`` command-line entry point
"""

__version__ = "0.1.0"

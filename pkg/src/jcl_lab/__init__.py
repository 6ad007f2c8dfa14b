"""jcl_lab: domain-adaptation bound checks and a small joint contrastive learning trainer.

Subpackages by concern:

* :mod:`jcl_lab.theory`      exact finite-domain error terms and bound checkers
* :mod:`jcl_lab.infotheory`  discrete entropy / MI / JS and the InfoNCE estimator
* :mod:`jcl_lab.nn`          numpy MLP with hand-written gradients, losses, SGD
* :mod:`jcl_lab.moco`        momentum key encoder update and the labelled key queue
* :mod:`jcl_lab.cluster`     spherical k-means pseudo-labels and class rebalancing
* :mod:`jcl_lab.data`        synthetic shifted-domain tasks
* :mod:`jcl_lab.trainer`     the training loop, source-only baseline, probes
* :mod:`jcl_lab.cli`         command-line entry points

All logarithms are natural logs.
"""

__version__ = "0.1.0"

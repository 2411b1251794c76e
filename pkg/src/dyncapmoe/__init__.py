"""Dynamic-capacity mixture-of-experts with hybrid routing-gradient estimation.

Subpackages:

* :mod:`dyncapmoe.autodiff` - float64 tensors with a reverse-mode tape
* :mod:`dyncapmoe.estimator` - hybrid straight-through routing-gradient
  estimator plus exact-enumeration oracles
* :mod:`dyncapmoe.moe` - the expert layer: linear router, top-p selection,
  routed/null/shared expert roles
* :mod:`dyncapmoe.rope3d` - (temporal, height, width) position IDs for
  text/audio/image/video token streams and the rotary application
* :mod:`dyncapmoe.analytics` - routing traces, activation reports, export
* :mod:`dyncapmoe.harness` - toy transformer block, synthetic data,
  training loop and gradient-check campaign
* :mod:`dyncapmoe.cli` - ``gradcheck`` / ``train`` / ``analyze`` /
  ``rope-dump`` subcommands
"""

__version__ = "0.1.0"

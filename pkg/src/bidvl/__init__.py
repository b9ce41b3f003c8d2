"""Bi-level doubly variational learning for energy-based latent variable models.

Subpackages by role:

* :mod:`bidvl.tensor` -- reverse-mode autodiff over float64 arrays
* :mod:`bidvl.nets` -- energy network, Gaussian encoder, generator
* :mod:`bidvl.divergence` -- KL/TV/MMD/KSD and importance ratios
* :mod:`bidvl.core` -- the two-level objectives, Adam and the training loop
* :mod:`bidvl.oracle` -- exact enumeration on small discrete models
* :mod:`bidvl.data`, :mod:`bidvl.config`, :mod:`bidvl.checkpoint` -- I/O
* :mod:`bidvl.evaluate` -- reconstruction, OOD and sample-quality metrics
* :mod:`bidvl.cli` -- the ``bidvl`` command
"""

__version__ = "0.1.0"

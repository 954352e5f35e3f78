"""Hierarchical semantic-ID reinforcement learning lab.

Offline item tokenization into a fixed semantic action space, a
coarse-to-fine residual policy with a multi-level critic trained by
actor-critic against a simulated user environment, and a CLI harness for
ablations and sensitivity sweeps.
"""

__version__ = "0.1.0"

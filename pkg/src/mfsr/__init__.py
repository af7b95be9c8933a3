"""Multi-frame super-resolution of low-resolution image stacks.

Subpackages: ``grad`` (autodiff), plus modules for the fusion and
registration networks, Lanczos shifting, scoring, scene data handling,
baselines, training and the command line front end.
"""

__version__ = "0.1.0"

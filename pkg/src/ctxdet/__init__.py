"""Toy transformer detector with a class-wise prototype memory.

Subpackages: nn (primitives + gradient checking), memory (prototype bank),
sampling (score-based slot gating), detector (model, matching, losses,
training), adapt (test-time memory adaptation), stream (synthetic data),
evalkit (AP metrics), config / dataio / snapshots / pipeline / cli
(artifact plumbing).
"""

__version__ = "0.1.0"

"""Pipeline engine for building critic-filtered code-solution training data.

Subpackages cover the full loop: corpus ingestion, sandboxed program
execution, heuristic answer matching, critic judging, dataset construction
(SFT / hard-filtered SFT / preference pairs), alignment-loss kernels, and a
dual-scorer evaluation bench, tied together by a resumable orchestrator.
"""

__version__ = "0.1.0"

"""Desk-scale fine-tuning laboratory.

A self-contained micro vision transformer with pluggable PEFT methods
(parallel adapter, shallow prompts, scale-shift), a trainable gist token
appended to the frozen sequence, and a bidirectional temperature-softened
KL interaction loss, all on a tape-based autodiff core that every
gradient path verifies against finite differences.
"""

__version__ = "0.1.0"

"""Class-level structural relation modelling and smoothing over embeddings.

Subpackages:

- ``numerics``: dense tensors with reverse-mode differentiation
- ``data_io``: FSB1 interchange format and synthetic data generation
- ``crm``: adaptive-resonance clustering and the relation graph
- ``cags``: class-aware samplers, difficulty, curriculum schedule
- ``rgrl``: graph smoothing, prototype alignment, losses, training
- ``pipeline`` / ``cli``: stage orchestration and the ``csrms`` command
"""

__version__ = "0.1.0"

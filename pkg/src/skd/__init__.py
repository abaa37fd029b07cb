"""Semi-supervised teacher-student training on synthetic slice stacks."""

__version__ = "0.1.0"

"""Dynamic Expert Sharing simulator for MoE routing under block-parallel decoding."""

__version__ = "0.1.0"

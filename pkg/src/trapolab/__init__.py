"""Desk-scale laboratory for trust-region SFT, micro-group guidance and
group-relative policy gradients on small, exactly analyzable policies."""

__version__ = "0.1.0"

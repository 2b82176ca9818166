"""5DOF needle tracking in OCT B-scans from elliptical cross-sections."""

__version__ = "0.1.0"

"""streamshare: deterministic stream-processing simulator with adaptive
work sharing across concurrent queries."""

__version__ = "0.1.0"

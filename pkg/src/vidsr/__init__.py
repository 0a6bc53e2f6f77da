"""Content-aware video super-resolution for chunked delivery.

Train one multi-branch SR model per video, fuse it losslessly into a
single-branch model for delivery, attach per-chunk transparent prompts,
and account for delivery cost and restoration quality.
"""

__version__ = "0.1.0"

"""Per-identity universal privacy masks for face images.

A mask is learned from a few of a user's photos against a small team of
recognition models, subtracted from every photo the user shares, and added
back by anyone holding the key file.
"""

__version__ = "0.1.0"

"""Local-forgetting replay buffers, deep Dyna-Q and the two-phase LoCA harness."""

__version__ = "0.1.0"

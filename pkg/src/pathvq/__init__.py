"""pathvq: vector-quantization codec and slide-level SSL toolkit
for high-dimensional spatial feature tokens."""

__version__ = "0.1.0"

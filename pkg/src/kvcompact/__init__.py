"""Differentiated KV-cache compression: mixed-precision quantization, a three-level
significance policy and a paged store coordinated by prefix sums."""

__version__ = "0.1.0"

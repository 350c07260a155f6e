"""Cross-resolution face recognition toolkit.

Hallucinates very low resolution faces with facial-prior guidance, aligns
hallucinated and real high-resolution feature statistics with a multi-kernel
MMD adversary, and distills a frozen high-resolution teacher into a
low-resolution student with a residual assistant network.
"""

__version__ = "0.1.0"

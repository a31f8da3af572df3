"""edgert: a desk-scale edge-inference toolchain.

Ahead-of-time side: parse declarative model graphs, lower them to a
restricted edge dialect, quantize, carve out delegate subgraphs, plan
tensor memory, and serialize to a compact binary container. Runtime side:
a lean interpreter that resolves kernels once at init, executes flat
instruction lists over caller-provided arenas, and exposes tracing
devtools.
"""

__version__ = "0.1.0"

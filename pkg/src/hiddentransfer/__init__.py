"""Hidden-state transfer parallel decoding on a toy byte-level transformer.

Train linear projections that synthesize pseudo hidden states of future
tokens at intermediate layers, then decode with draft-and-verify tree
attention that reproduces greedy autoregressive output exactly.
"""

__version__ = "0.1.0"

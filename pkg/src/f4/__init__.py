"""4-bit-compact MLP toolchain.

Trains multilayer perceptrons under an entropy-constrained 4-bit weight
quantizer, compresses them into interchangeable on-chip formats (dense
4-bit, bitmask, chunked CSR), and replays them through a bit-exact
software model of an accumulate-then-multiply datapath with an
operation-level cost model.
"""

__version__ = "0.1.0"

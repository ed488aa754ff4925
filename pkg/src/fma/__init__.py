"""Hierarchical multilevel attention: operators, oracles, LM harness, benchmarks.

Submodules:

* ``tensor_core``   numpy-backed primitives, counters, Parameter
* ``hierarchy``     tree config and block interaction lists
* ``downsampler``   learned strided grouped-conv summarization
* ``kernels``       band / far-field contraction kernels with adjoints
* ``attention``     the loglinear and linear attention operators
* ``oracle``        slow pure-loop references (float64)
* ``lm``            byte-level transformer harness and CLI
* ``bench``         counter-based benchmark CLI
"""

__version__ = "0.1.0"

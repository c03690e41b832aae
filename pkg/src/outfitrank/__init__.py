"""Set-compatibility ranking networks for outfit recommendation, on a small numpy autodiff core.

Modules: ``autodiff`` (tensors, reverse mode, momentum SGD), ``layers`` (conv/LRN/pool backbone),
``models`` (variants A, B, C and checkpoints), ``catalog`` (synthetic items, users, oracle),
``training`` (two-stage protocol), ``metrics`` (NDCG, top-k), ``cli``.
"""

__version__ = "0.1.0"

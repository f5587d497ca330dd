"""Clustered, compressed mixture-of-experts layers on a desk-scale numpy engine.

Modules: ``numerics`` (cosine, Jacobi SVD), ``expert_bank``, ``clustering``,
``compression``, ``routing``, ``quantization``, ``comm_sim``,
``memory_manager``, ``trainer`` and the ``cli`` entry point.
"""

__version__ = "0.1.0"

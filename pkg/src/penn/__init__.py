"""Physics-embedded neural networks on hexahedral meshes.

E(3)-equivariant gradient operators with Neumann constraints, boundary
encoders with exact Dirichlet layers and pseudoinverse decoders, and an
implicit neural nonlinear solver driven by Barzilai-Borwein steps.
"""

import os as _os

# PENN_THREADS caps BLAS threads; only effective before numpy is first imported
if _os.environ.get("PENN_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["PENN_THREADS"])

__version__ = "0.1.0"

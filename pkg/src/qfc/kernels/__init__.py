"""Backend selection for the hot per-step kernels.

Two interchangeable implementations exist: a compiled Cython extension
(``_cykernels``) and a pure-numpy reference (``_ref``). The compiled one
is preferred when importable; set QFC_BACKEND=python or QFC_BACKEND=compiled
to force a choice (forcing "compiled" raises if the extension is missing,
e.g. before ``python setup.py build_ext --inplace`` has been run).
"""

from __future__ import annotations

import os

from . import _ref

_choice = os.environ.get("QFC_BACKEND", "auto").lower()

if _choice not in ("auto", "python", "compiled"):
    raise ValueError(f"QFC_BACKEND={_choice!r}; expected auto, python or compiled")

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import _cykernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "QFC_BACKEND=compiled but the extension is not built; "
                "run: python setup.py build_ext --inplace"
            )
        _impl = None
if _impl is None:
    _impl = _ref

BACKEND_NAME = _impl.BACKEND_NAME

dissipator = _impl.dissipator
innovation = _impl.innovation
sme_step = _impl.sme_step
sme_step_record = _impl.sme_step_record
sinusoid_components = _impl.sinusoid_components
paqs_theta_opt = _impl.paqs_theta_opt
feedback_rotation = _impl.feedback_rotation
paqs_label_rollout = _impl.paqs_label_rollout
sme_fixed_rollout = _impl.sme_fixed_rollout

reference = _ref
active = _impl

"""Hot kernels with a compiled core and a numpy fallback.

The compiled extension is used when it was built and importable; setting
``GEOREP_PURE_PYTHON=1`` forces the fallback. ``BACKEND`` names the active one.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("GEOREP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

closest_params = _active.closest_params
point_segment_sqdist = _active.point_segment_sqdist
ball_contact = _active.ball_contact
box_contact = _active.box_contact
otsu_threshold = _active.otsu_threshold
splat_disc = _active.splat_disc
splat_box = _active.splat_box

__all__ = [
    "BACKEND",
    "ball_contact",
    "box_contact",
    "closest_params",
    "compiled_backend",
    "otsu_threshold",
    "point_segment_sqdist",
    "python_backend",
    "splat_box",
    "splat_disc",
]

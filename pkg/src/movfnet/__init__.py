"""Rotation-invariant volumetric classification with a fixed per-voxel moving frame.

Submodules: ``volume`` (I/O, rotations), ``gaussian`` (jets), ``frame``
(moving frames), ``network``, ``train``, ``equicheck`` and ``cli``.
The package root stays import-light so the command line can configure
thread pools before numpy loads.
"""

__version__ = "0.1.0"

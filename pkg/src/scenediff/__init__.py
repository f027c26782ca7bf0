"""Diffusion-based generation of object-set scenes with physical feasibility.

The package is organised around a small set of layers:

- ``rotations`` / ``assets`` / ``scene``: core types (rotation representations,
  sphere-decomposed assets, fixed-capacity scenes) and tensor codecs.
- ``feasibility``: signed distances, non-penetration projection, quasi-static
  settling, and per-object feasibility reports.
- ``grammar`` / ``dataset``: probabilistic scene grammars, rejection sampling,
  text annotation, and JSON-lines dataset files.
- ``diffusion`` / ``model``: the forward corruption processes, reverse
  samplers (ancestral / strided deterministic), guidance and inpainting, and
  the permutation-equivariant denoiser.
- ``training``: mixed continuous/categorical losses, optimiser schedule, EMA,
  and multi-dataset batch mixing.
- ``search`` / ``posttrain``: tree search over partial scenes and
  score-function reward post-training.
- ``metrics`` / ``plots`` / ``cli``: evaluation metrics, report figures, and
  the command-line interface.
"""

from scenediff.assets import AssetDef, AssetLibrary, builtin_library
from scenediff.rotations import Rotation, project_rotation_9d
from scenediff.scene import InpaintMask, ObjectSlot, Scene

__all__ = [
    "AssetDef",
    "AssetLibrary",
    "builtin_library",
    "Rotation",
    "project_rotation_9d",
    "InpaintMask",
    "ObjectSlot",
    "Scene",
]

__version__ = "0.1.0"

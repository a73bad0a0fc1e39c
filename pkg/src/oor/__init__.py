"""Object-object spatial relationships: registration, score-based diffusion and guided scene layout.

Submodules are imported on demand; ``import oor`` stays cheap. Typical entry points:

* :mod:`oor.geometry` for rotations, similarity transforms and boxes,
* :mod:`oor.network` for the score model and its training,
* :mod:`oor.sampler` and :mod:`oor.editing` for sampling and editing,
* :mod:`oor.cli` for the ``oor`` command.
"""

__version__ = "0.1.0"

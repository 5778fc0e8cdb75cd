"""Rearticulable 3D models from point-cloud videos.

Pipeline: fit a relaxed per-part 6-DOF model to a short point-cloud
sequence, project it onto a kinematic tree of 1-DOF screw joints, refit,
then retarget the result to novel poses from sparse point constraints.
"""

__version__ = "0.1.0"

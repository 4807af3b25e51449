"""Head pose estimation toolkit: quaternion geometry, losses with analytic
gradients, a deformable face model, pseudo-label fitting, augmentation,
evaluation and a toy trainer."""

__version__ = "0.1.0"

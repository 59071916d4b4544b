"""Dense 3D face correspondence and deformable model fitting."""

"""pfmdesk: scaling calculator and desk-scale lifecycle simulator for
optical physical foundation models.

Subpackages:
  scaling     closed-form device scaling and baseline comparison
  medium      voxel media, optical fields, device designs, file formats
  propagation split-step beam propagation, readout, linear-map probing
  training    gradient-based inverse design of voxel media
  variability fabrication noise, digital compensation, partial retuning
  ensemble    fixed-expert pools routed by a trainable digital gate
  cli         command-line pipeline with reproducible report bundles
"""

__version__ = "0.1.0"

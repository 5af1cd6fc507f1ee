"""Diffusion tensor maps from few diffusion-weighted images.

Modules
-------
dti           log-linear tensor fit, eigendecomposition, FA/MD/colour maps
phantom       synthetic phantoms, gradient schemes, noise/motion/lesions
network       residual conv/deconv network with manual backprop and ADAM
training      patch-based training and slice-wise inference
tractography  FACT streamline tracking and ROI selection
metrics       PSNR, NMSE, SSIM, ROI statistics and lesion contrast
experiments   end-to-end experiment recipes
io            file formats
plotting      PNG figures
cli           command-line entry point
"""

__version__ = "0.1.0"

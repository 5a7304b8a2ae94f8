"""Multi-modal pedestrian trajectory forecasting.

Future locations are modeled as per-timestep bivariate Gaussians; a
conditional diffusion model generates their sufficient statistics, and a
hybrid sampler draws candidate trajectories from both the diffusion and
the explicit Gaussians.
"""

__version__ = "0.1.0"

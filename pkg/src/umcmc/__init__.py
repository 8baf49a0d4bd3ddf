"""Deep-unfolded MCMC samplers trained as regularised conditional Wasserstein GANs."""

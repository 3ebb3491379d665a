"""Fitness-conditioned latent flow matching for sequence design."""

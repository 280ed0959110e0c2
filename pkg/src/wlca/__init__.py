"""Survey-weighted latent class analysis with BCH distal outcomes and MNL covariates."""

__version__ = "0.1.0"

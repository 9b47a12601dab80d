# Numerical core: spatial bases, the basis-SGLMM density, the mixing MLP,
# the semi-implicit variational fitter and the MCMC baselines.

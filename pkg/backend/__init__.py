# sivi_sglmm: semi-implicit variational inference for basis-expanded spatial GLMMs.
__version__ = "0.1.0"

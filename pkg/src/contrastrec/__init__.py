"""contrastrec: an explanation-aware recommender lab.

The package couples a deterministic text-generation gateway (stub or HTTP)
with a from-scratch autoencoder and recommender, plus a multi-environment
regression workbench and a staged CLI pipeline.
"""

__version__ = "0.1.0"

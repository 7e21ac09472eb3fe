"""Speaker embeddings disentangled from residual information, trained with
a mutual-information critic and an identity-change reconstruction loss."""

__version__ = "0.1.0"

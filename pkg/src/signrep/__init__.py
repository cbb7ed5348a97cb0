"""SignRep at desk scale: sign-prior masked video pretraining, style-adversarial regularisation and dictionary retrieval."""

__version__ = "0.1.0"

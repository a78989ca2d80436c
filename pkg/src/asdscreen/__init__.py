"""Transfer-learning ASD screening pipeline: ingest, preprocess, train,
evaluate and audit."""

__version__ = "0.1.0"

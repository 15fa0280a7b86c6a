"""Query-dependent hint reranking with a frozen miniature language model.

Modules: ``numcore`` (autodiff and Adam), ``textdata`` (vocab, files,
synthetic data), ``minilm`` (frozen causal LM), ``qdmodule`` (hint module),
``scoring`` (prompts and query likelihood), ``trainer`` (losses, loop,
checkpoints), ``bm25``, ``evalrank`` (reranking, metrics, t-test),
``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"

"""Knowledge distillation of query-title relevance classifiers into small BERT, BiLSTM and hybrid students."""

__version__ = "0.1.0"

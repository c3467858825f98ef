"""Toy factual-knowledge unlearning laboratory: corpus, transformer, unlearning methods, attribution probes and relearning attacks."""

__version__ = "0.1.0"

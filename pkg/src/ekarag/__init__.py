"""Early-knowledge-aligned retrieval-augmented reasoning: retrieval, rollouts, metrics and theory checks."""

__version__ = "0.1.0"

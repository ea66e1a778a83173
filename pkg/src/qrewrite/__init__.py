"""Multi-task query rewriting with relevance tags and composite-reward GRPO alignment."""

__version__ = "0.1.0"

"""Cost-aware routing between Think and Non-Think modes for LLM rankers."""

__version__ = "0.1.0"

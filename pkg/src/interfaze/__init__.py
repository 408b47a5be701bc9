"""Context-centric LLM gateway: small tools build the context, one LLM answers."""

__version__ = "0.1.0"

"""All-in-one adverse-weather restoration with task-aware prompts."""

__version__ = "0.1.0"

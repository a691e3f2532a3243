"""
Row completion for entity tables: knowledge-base linking, subject suggestion and gap filling.
"""

__version__ = "0.1.0"

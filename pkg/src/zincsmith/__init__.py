"""zincsmith: natural-language combinatorial problems to executable MiniZinc.

The package wires modeling, validation, and selection agent roles over a
pluggable LLM gateway, runs candidates through a staged checking cascade
(syntax, solver status, output format, semantic majority), and scores final
solutions against reference models.
"""

__version__ = "0.1.0"

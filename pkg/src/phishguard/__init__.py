"""phishguard: personalized phishing-email detection.

Combines retrieval of a user's semantically similar legitimate emails,
real-time domain/URL reputation evidence, and a structured-prompt LLM
verdict, plus an evaluation harness for the with/without-RAG matrix.
"""

__version__ = "0.1.0"

"""Privacy-preserving video transformation.

The pipeline tokenizes a clip into space-time tubelets, progressively
drops the tokens that carry private detail while keeping the ones that
carry motion, rewrites the survivors in embedding space, and decodes
them back to pixels.  Adversarial training balances a pair of
recognizers so action stays legible and privacy attributes do not.

Everything runs on numpy through a small reverse-mode tape; no deep
learning framework is required.
"""

__version__ = "0.1.0"

"""Energy-based abstention for retrieval-grounded question answering.

A projector maps fixed sentence embeddings onto a unit sphere and an energy
head scores them; high energy means the query is out of scope and the system
should abstain. Training uses EC-SCTL, a semi-contrastive triplet loss with an
energy margin, against banded, hard and external negatives.
"""

__version__ = "0.1.0"

"""vuln2rule: free-text vulnerability descriptions to MulVAL-style Datalog
interaction rules.

Stages: corpus ingestion and vocabulary, domain word embeddings (CBOW/SG),
BLSTM attack-entity tagging, missing-entity completion (k-means clusters +
multinomial logistic regression), and rule synthesis with statistically
learned variable wiring.
"""

__version__ = "0.1.0"

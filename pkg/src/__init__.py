"""Cross-regularization: regularization parameters trained on a held-out set."""

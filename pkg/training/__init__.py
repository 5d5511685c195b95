"""
Training module: optimizer, metrics and the training loop
"""

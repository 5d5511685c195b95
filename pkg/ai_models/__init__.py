"""
AI models module for the TRG toolkit: losses, model variants and checkpoints
"""

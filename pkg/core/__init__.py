"""
Core module for the TRG toolkit: tensor engine, gradient checking and the TRG layer
"""

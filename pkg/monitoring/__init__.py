"""
Monitoring module for the TRG toolkit
"""

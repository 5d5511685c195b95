"""
Synthetic event-grammar data: generation, frame sampling and the TRGD file format
"""

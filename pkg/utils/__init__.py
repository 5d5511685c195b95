"""
Utilities: seeded random streams, logging setup and argument validators
"""

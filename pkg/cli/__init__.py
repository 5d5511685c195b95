"""
Command implementations and plotting for the trg-lab CLI
"""

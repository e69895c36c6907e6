"""
Test package for the AHP-Net low-dose CT toolkit
"""

# Utilities package for the AHP-Net toolkit
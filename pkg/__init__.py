# AHP-Net low-dose CT toolkit
# Unrolled half-quadratic splitting with adaptive hyper-parameters
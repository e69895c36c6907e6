# Models package for the AHP-Net toolkit
# Stage denoisers, hyper-parameter predictors, the unrolled network and its trainer
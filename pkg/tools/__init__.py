# Tools package for the AHP-Net toolkit
# Numeric building blocks: geometry, simulation, framelets, solvers, layers
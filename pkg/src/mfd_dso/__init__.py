"""MFD regional traffic simulation and dynamic system optimum control."""

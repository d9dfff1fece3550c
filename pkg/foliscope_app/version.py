__version__ = "0.4.0"
__app_name__ = "Foliscope"
__description__ = "Numerical lab for singular holomorphic foliations on the projective plane"
__author__ = "Foliscope developers"

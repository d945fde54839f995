# Tests package for PTNN Toolkit

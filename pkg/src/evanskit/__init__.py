"""Evans functions, Jost solutions and 2-modified Fredholm determinants for linear ODE systems."""

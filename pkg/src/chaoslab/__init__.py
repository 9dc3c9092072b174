"""chaoslab: mean-field particle dynamics on the torus, cumulant/correlation
estimation of the empirical measure, Vlasov and two-particle correction
solvers, and the screened (Lenard-Balescu type) collision operator, together
with the scaling experiments that tie them together."""

__version__ = "0.1.0"

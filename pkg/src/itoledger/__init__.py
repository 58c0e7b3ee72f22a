"""itoledger - term-by-term verification of Ito formulas for jump diffusions and L_p fields."""

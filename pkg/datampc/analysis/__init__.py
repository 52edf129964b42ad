"""Model-based diagnostics for data-driven predictors."""

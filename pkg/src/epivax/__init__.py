"""Economic-epidemiological vaccination policy toolkit."""

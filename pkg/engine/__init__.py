"""Numerical core: graph store, embeddings, extraction, autodiff, encoder, selector, reasoning loop, benchmarks."""

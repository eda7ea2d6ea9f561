"""Object-aware Gaussian splat mapping, open-vocabulary querying and path planning."""

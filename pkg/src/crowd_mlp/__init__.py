"""crowd_mlp package."""

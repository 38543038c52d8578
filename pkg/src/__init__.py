"""docrel-desk package."""

# Pre-forgettable classifier configuration

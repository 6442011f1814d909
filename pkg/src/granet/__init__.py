"""GraNet point-cloud semantic labeling."""

"""Open-set acoustic scene classification: features, classifier and open-set back-ends."""

# Package marker for scenarios.

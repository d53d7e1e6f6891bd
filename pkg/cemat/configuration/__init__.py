from cemat.configuration.configuration import RunConfig, parse_overrides
from cemat.configuration.jobs import Job, Scenario

__all__ = ["Job", "RunConfig", "Scenario", "parse_overrides"]

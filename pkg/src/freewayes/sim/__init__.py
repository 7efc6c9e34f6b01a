"""Desk-scale microscopic freeway simulator."""
from .demand import DemandProfile, sample_demand, sample_from_config
from .simulator import ActuatorState, FreewaySim, SensorReading, SimulationError

__all__ = ["ActuatorState", "DemandProfile", "FreewaySim", "SensorReading", "SimulationError",
           "sample_demand", "sample_from_config"]

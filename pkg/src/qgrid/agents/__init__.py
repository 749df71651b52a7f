from qgrid.agents.agent import Agent, AgentConfig, AgentRole
from qgrid.agents.keysource import JitterModel, KeySource, KeySourceConfig, run_key_source
from qgrid.agents.scenario import RunArtifacts, Scenario, load_scenario, run_scenario

__all__ = [
    "Agent",
    "AgentConfig",
    "AgentRole",
    "JitterModel",
    "KeySource",
    "KeySourceConfig",
    "RunArtifacts",
    "Scenario",
    "load_scenario",
    "run_key_source",
    "run_scenario",
]

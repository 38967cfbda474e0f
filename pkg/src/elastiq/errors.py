class ElastiqError(Exception):
    pass


class DegenerateSamples(ElastiqError):
    pass


class MalformedTimeline(ElastiqError):
    pass


class NotEnoughTuples(ElastiqError):
    pass


class InfeasibleBatch(ElastiqError):
    pass


class Infeasible(ElastiqError):
    pass


class NoFeasibleSchedule(Infeasible):
    pass


class ScenarioInfeasible(Infeasible):
    pass


class ScenarioError(ElastiqError):
    """Bad scenario document (schema or reference error)."""

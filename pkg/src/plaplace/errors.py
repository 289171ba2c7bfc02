"""Exception hierarchy shared by all modules."""


class PLaplaceError(Exception):
    """Base class for every error raised by the package."""


class SingularPoint(PLaplaceError, ValueError):
    """The Hessian of the energy density is undefined at the requested point."""


class InequalityViolation(PLaplaceError, AssertionError):
    def __init__(self, name, witness):
        self.name = name
        self.witness = witness
        super().__init__(f"inequality {name} violated at {witness}")


class MeshGenerationFailure(PLaplaceError):
    pass


class PartitionFailure(PLaplaceError):
    pass


class MeshMismatch(PLaplaceError, ValueError):
    pass


class NewtonDivergence(PLaplaceError, RuntimeError):
    pass


class SingularTangent(PLaplaceError, RuntimeError):
    pass


class AliasingError(PLaplaceError, ValueError):
    pass


class FactorizationFailure(PLaplaceError, RuntimeError):
    pass


class IllConditioned(PLaplaceError, RuntimeError):
    pass


class NonPositiveReconstruction(PLaplaceError, ValueError):
    pass


class ConfigError(PLaplaceError, ValueError):
    pass

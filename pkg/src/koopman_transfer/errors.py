"""Exception types shared across the package."""


class KoopmanTransferError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(KoopmanTransferError, ValueError):
    pass


class NotScalar(KoopmanTransferError, ValueError):
    pass


class DetachedNode(KoopmanTransferError, RuntimeError):
    pass


class StepSizeUnderflow(KoopmanTransferError, ArithmeticError):
    def __init__(self, t, h, seed=None):
        self.t, self.h, self.seed = t, h, seed
        where = f" (seed {seed})" if seed is not None else ""
        super().__init__(f"step size {h:.3e} fell below the floor at t={t:.6f}{where}")


class WindowTooLong(KoopmanTransferError, ValueError):
    pass


class DegenerateAxis(KoopmanTransferError, ValueError):
    pass


class RankDeficient(KoopmanTransferError, ValueError):
    def __init__(self, rank, k):
        self.rank, self.k = rank, k
        super().__init__(f"covariance rank {rank} is smaller than requested k={k}")


class NonFiniteLoss(KoopmanTransferError, ArithmeticError):
    def __init__(self, epoch, value=float("nan")):
        self.epoch = epoch
        super().__init__(f"non-finite loss {value} at epoch {epoch}")


class ContextOverflow(KoopmanTransferError, ValueError):
    pass


class NotConverged(KoopmanTransferError, RuntimeError):
    def __init__(self, result):
        self.result = result
        super().__init__(
            f"sculpting did not converge in {len(result.deltas)} iterations "
            f"(last delta {result.deltas[-1] if result.deltas else float('nan'):.3e})"
        )


class MissingLabels(KoopmanTransferError, ValueError):
    pass


class EmptyInput(KoopmanTransferError, ValueError):
    pass


class ZeroVariance(KoopmanTransferError, ValueError):
    pass


class AllZeroDifferences(KoopmanTransferError, ValueError):
    pass


class TooFewSamples(KoopmanTransferError, ValueError):
    pass


class MissingPrerequisite(KoopmanTransferError, FileNotFoundError):
    def __init__(self, artifact):
        self.artifact = str(artifact)
        super().__init__(f"missing prerequisite: {self.artifact}")


class ConfigInvalid(KoopmanTransferError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")

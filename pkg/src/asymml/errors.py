class DegenerateInputError(ValueError):
    """Raised for zero-norm or otherwise unusable embeddings."""


class ConfigurationError(ValueError):
    """Raised for inconsistent or infeasible configuration."""


class TrainingDiverged(RuntimeError):
    """Loss or parameters became non-finite during training."""

    def __init__(self, epoch, batch, detail=""):
        self.epoch = epoch
        self.batch = batch
        msg = f"training diverged at epoch {epoch}, batch {batch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)

"""
Error types for the sign attack toolkit.

Every failure the pipeline reports on purpose derives from SignAttackError so
the command-line assistant can turn it into an error record.
"""


class SignAttackError(RuntimeError):
    """Base class for all expected pipeline failures."""

    error_type = "error"
    exit_code = 1


class ConfigurationError(SignAttackError):
    """Invalid experiment configuration or missing dataset root."""

    error_type = "configuration"
    exit_code = 2

    def __init__(self, message, field_path=None):
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)
        self.field_path = field_path


class MissingArtifactError(SignAttackError):
    """A prerequisite artifact has not been produced yet."""

    error_type = "missing_artifact"
    exit_code = 3

    def __init__(self, path, producer):
        super().__init__(f"missing artifact {path}; run '{producer}' first")
        self.path = str(path)
        self.producer = producer


class DataIngestError(SignAttackError):
    error_type = "data_ingest"


class ShapeMismatchError(SignAttackError):
    error_type = "shape_mismatch"


class UnknownVariantError(SignAttackError):
    error_type = "unknown_variant"


class UntrainedNetworkError(SignAttackError):
    error_type = "untrained_network"


class TrainingDivergedError(SignAttackError):
    """Loss became non-finite while training a network."""

    error_type = "training_diverged"

    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class AttackDivergedError(SignAttackError):
    """Attack objective became non-finite."""

    error_type = "attack_diverged"

    def __init__(self, epoch, objective):
        super().__init__(f"attack objective became non-finite at epoch {epoch} ({objective})")
        self.epoch = epoch
        self.objective = objective


class NoEligibleImagesError(SignAttackError):
    """No clean image was classified correctly, so ASR is undefined."""

    error_type = "no_eligible_images"

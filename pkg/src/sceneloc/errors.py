"""Exception taxonomy. Every error carries a machine-parsable category string
that the CLI prints on stderr and maps to a stable exit code."""


class SceneLocError(Exception):
    category = "error"


# scene_data
class InvalidDepth(SceneLocError):
    category = "invalid-depth"


class CameraOutsideScene(SceneLocError):
    category = "camera-outside-scene"


class MissingFile(SceneLocError):
    category = "missing-file"


class MalformedPoseMatrix(SceneLocError):
    category = "malformed-pose-matrix"


class DimensionMismatch(SceneLocError):
    category = "dimension-mismatch"


# forest
class InsufficientSamples(SceneLocError):
    category = "insufficient-samples"


# forestnet
class NonFiniteActivation(SceneLocError):
    category = "non-finite-activation"


class NonFiniteLoss(SceneLocError):
    category = "non-finite-loss"


class StaleCache(SceneLocError):
    category = "stale-cache"


class VariantNotMappable(SceneLocError):
    category = "variant-not-mappable"


# robust_average
class StaleState(SceneLocError):
    category = "stale-state"


# netsplit
class InvalidSubtreeDepth(SceneLocError):
    category = "invalid-depth"


# pose_ransac
class DegenerateConfiguration(SceneLocError):
    category = "degenerate-configuration"


class InsufficientCorrespondences(SceneLocError):
    category = "insufficient-correspondences"


class NoValidHypothesis(SceneLocError):
    category = "no-valid-hypothesis"


# metrics
class EmptyInput(SceneLocError):
    category = "empty-input"


class EmptyScene(SceneLocError):
    category = "empty-scene"


# pipeline
class StaleProvenance(SceneLocError):
    category = "stale-provenance"


class ConfigInvalid(SceneLocError):
    category = "config-invalid"


class IOFailure(SceneLocError):
    category = "io-failure"


#: exit codes for the CLI, keyed by category (0 is success, 1 is unexpected)
EXIT_CODES = {
    "invalid-depth": 2,
    "camera-outside-scene": 3,
    "missing-file": 4,
    "malformed-pose-matrix": 5,
    "dimension-mismatch": 6,
    "insufficient-samples": 7,
    "non-finite-activation": 8,
    "non-finite-loss": 9,
    "stale-cache": 10,
    "variant-not-mappable": 11,
    "stale-state": 12,
    "degenerate-configuration": 13,
    "insufficient-correspondences": 14,
    "no-valid-hypothesis": 15,
    "empty-input": 16,
    "empty-scene": 17,
    "stale-provenance": 18,
    "config-invalid": 19,
    "io-failure": 20,
    "error": 1,
}

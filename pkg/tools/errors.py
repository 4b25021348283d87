"""
Exception hierarchy shared by every tool module.

Library functions raise these; tool execute() boundaries turn them into
{"status": "error", "message": ...} dicts.
"""


class PufAuthError(Exception):
    pass


# === puf_sim ===
class DegenerateSeed(PufAuthError):
    pass


class ChallengeWidthMismatch(PufAuthError):
    pass


class ShapeMismatch(PufAuthError):
    pass


# === imaging ===
class LengthMismatch(PufAuthError):
    pass


class CropOutOfBounds(PufAuthError):
    pass


class InvalidNormalization(PufAuthError):
    pass


# === openset_classifier ===
class EmptyClass(PufAuthError):
    pass


class TrainingDiverged(PufAuthError):
    pass


class CalibrationImpossible(PufAuthError):
    pass


class EvaluationImpossible(PufAuthError):
    pass


# === replay_filter ===
class InvalidTarget(PufAuthError):
    pass


# === auth_protocol ===
class RegistryConflict(PufAuthError):
    pass


class ProtocolError(PufAuthError):
    pass


# Bad magic / version in dumps, snapshots and manifests
class FormatError(PufAuthError):
    pass

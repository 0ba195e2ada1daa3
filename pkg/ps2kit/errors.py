"""Exception hierarchy shared by all ps2kit modules."""

from typing import Optional


class PS2Error(Exception):
	pass


class DomainError(PS2Error, ValueError):
	"""Input outside the documented range (angles, bin indices)."""


class DegenerateInputError(PS2Error, ValueError):
	pass


class ArityError(PS2Error, ValueError):
	pass


class SingularConfigurationError(PS2Error):
	"""Light matrix is rank deficient (coplanar lights)."""


class ShapeError(PS2Error, ValueError):
	pass


class EmptyMaskError(PS2Error, ValueError):
	pass


class ConfigError(PS2Error):
	pass


class SchemaError(PS2Error):
	pass


class MissingLabelsError(PS2Error):
	pass


class InsufficientDiversityError(PS2Error):
	pass


class FormatError(PS2Error):
	def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None) -> None:
		self.path = path
		self.line = line
		where = ""
		if path:
			where = f" ({path}" + (f", line {line}" if line is not None else "") + ")"
		super().__init__(message + where)


class EmptyDatasetError(PS2Error):
	pass

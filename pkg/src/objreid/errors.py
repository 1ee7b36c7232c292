"""Exception types shared across the pipeline."""


class GeometryError(ValueError):
    """Invalid geometric input (non-positive dims, zero-length ray, ...)."""


class BehindCameraError(GeometryError):
    """Projection requested for a point at or behind the image plane."""


class DegenerateConicError(GeometryError):
    """Projected conic is not a real bounded ellipse."""


class TrajectoryRangeError(ValueError):
    """Timestamp outside the span covered by a trajectory."""


class EmptyMaskError(ValueError):
    """Segmentation mask has no pixels inside the region of interest."""


class ConfigError(ValueError):
    """Bad run configuration (unknown key, invalid value, overlapping splits)."""


class DataError(ValueError):
    """Malformed input data file."""

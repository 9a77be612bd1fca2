"""some utilities for data validation with pydantic"""

import math

from pydantic import BaseModel, ConfigDict, field_validator


class StrictBaseModel(BaseModel):
    """
    Rejects unknown fields and assumes that every float field must be finite.
    NaN or inf never make it past validation.
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    @field_validator("*", mode="after")
    def reject_non_finite_floats(cls, value, info):
        if isinstance(value, float) and not math.isfinite(value):
            raise ValueError(f'{info.field_name} must be finite, got {value}')
        if isinstance(value, (list, tuple)):
            for v in value:
                if isinstance(v, float) and not math.isfinite(v):
                    raise ValueError(f'{info.field_name} must only contain finite values')
        if isinstance(value, dict):
            for v in value.values():
                if isinstance(v, float) and not math.isfinite(v):
                    raise ValueError(f'{info.field_name} must only contain finite values')
        return value

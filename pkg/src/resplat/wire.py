"""Pydantic models for the backend wire protocol (HTTP and exchange dirs).

A generator request carries four files (coarse.png, mask.png, reference.png,
tokens.bin) plus a JSON metadata blob; the backend answers with refined.png.
A reconstructor request carries cameras.txt, view_###.png and optional
depth_###.png files plus metadata; the backend answers with scene.ply.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class GenerateMeta(BaseModel):
    request_id: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)


class ReconstructMeta(BaseModel):
    request_id: str
    n_views: int = Field(gt=0)
    has_depth: list[bool]


class HealthResponse(BaseModel):
    status: str
    service: str
    version: str


GENERATOR_DONE_MARKER = "done"
GENERATOR_RESULT_FILE = "refined.png"
RECONSTRUCTOR_RESULT_FILE = "scene.ply"

"""Data preparation: augmentation, mesh/image/scene conversion, synthetic corpora."""

from .augment import AugmentConfig, augment, random_input_dropout, rotation_about_axis
from .corpus import Dataset, make_synthetic_corpus, read_corpus, write_corpus
from .images import parse_pgm, pixels_to_pointcloud, read_pgm
from .mesh import TriangleMesh, parse_off, read_off, sample_mesh_surface
from .scenes import (
    Cube,
    CubeConfig,
    Scan,
    ScanCamera,
    extract_cubes,
    make_room_scene,
    merge_votes,
    scan_with_camera,
    virtual_scan,
)

__all__ = [
    "AugmentConfig",
    "Cube",
    "CubeConfig",
    "Dataset",
    "Scan",
    "ScanCamera",
    "TriangleMesh",
    "augment",
    "extract_cubes",
    "make_room_scene",
    "make_synthetic_corpus",
    "merge_votes",
    "parse_off",
    "parse_pgm",
    "pixels_to_pointcloud",
    "random_input_dropout",
    "read_corpus",
    "read_off",
    "read_pgm",
    "rotation_about_axis",
    "sample_mesh_surface",
    "scan_with_camera",
    "virtual_scan",
    "write_corpus",
]

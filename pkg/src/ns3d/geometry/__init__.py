from .sdf import (
    SdfShape,
    sphere,
    box,
    torus,
    cylinder,
    union,
    intersection,
    difference,
    transformed,
    translated,
    sdf_eval,
    sdf_gradient,
    save_shape,
    load_shape,
    to_dict,
    from_dict,
)
from .sampling import (
    PointCloud,
    QueryBatch,
    OccupancyGrid,
    grid_centers,
    occupancy_grid,
    shape_occupancy_grid,
    sample_surface,
    sample_queries,
)
from .mesh import (
    TriangleMesh,
    empty_mesh,
    marching_cubes,
    is_closed_manifold,
    euler_characteristic,
    edge_face_counts,
    sample_mesh_surface,
    save_obj,
    load_obj,
)
from .metrics import iou, chamfer, fscore, occupancy_accuracy

__all__ = [
    "SdfShape", "sphere", "box", "torus", "cylinder", "union", "intersection",
    "difference", "transformed", "translated", "sdf_eval", "sdf_gradient",
    "save_shape", "load_shape", "to_dict", "from_dict",
    "PointCloud", "QueryBatch", "OccupancyGrid", "grid_centers",
    "occupancy_grid", "shape_occupancy_grid", "sample_surface", "sample_queries",
    "TriangleMesh", "empty_mesh", "marching_cubes", "is_closed_manifold",
    "euler_characteristic", "edge_face_counts", "sample_mesh_surface",
    "save_obj", "load_obj",
    "iou", "chamfer", "fscore", "occupancy_accuracy",
]

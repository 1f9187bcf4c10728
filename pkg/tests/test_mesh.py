import io
import math

import numpy as np
import pytest

from hdivflow.exceptions import MeshError, MeshFormatError, PeriodicIdentificationError
from hdivflow.services.mesh import (
    BOUNDARY,
    PERIODIC,
    Mesh,
    apply_periodic_identification,
    load_mesh,
    mesh_from_spec,
    mesh_statistics,
    structured_triangulation,
    write_mesh,
)


class TestStructuredTriangulation:
    def test_single_square(self):
        mesh = structured_triangulation(1)
        assert mesh.num_triangles == 2
        assert mesh.num_vertices == 4
        assert mesh.num_facets == 5
        assert len(mesh.interior_facets()) == 1
        assert len(mesh.boundary_facets()) == 4

    def test_two_by_two(self):
        mesh = structured_triangulation(2)
        assert mesh.num_triangles == 8
        assert mesh.num_facets == 16
        assert len(mesh.interior_facets()) == 8

    def test_h_max(self):
        stats = mesh_statistics(structured_triangulation(4))
        assert stats["h_max"] == pytest.approx(math.sqrt(2.0) / 4.0)
        assert stats["h_min"] == pytest.approx(stats["h_max"])

    def test_rejects_nonpositive_n(self):
        with pytest.raises(ValueError):
            structured_triangulation(0)

    def test_areas_sum_to_one(self):
        mesh = structured_triangulation(5)
        assert mesh.areas.sum() == pytest.approx(1.0)
        assert np.all(mesh.determinants > 0.0)

    def test_arrays_are_read_only(self):
        mesh = structured_triangulation(2)
        with pytest.raises(ValueError):
            mesh.vertices[0, 0] = 0.5


class TestFacetOrientation:
    def test_normals_are_unit_and_outward_from_plus(self):
        mesh = structured_triangulation(3)
        assert np.allclose(np.linalg.norm(mesh.facet_normals, axis=1), 1.0)
        plus = mesh.facet_elements[:, 0]
        outward = np.einsum("fi,fi->f", mesh.facet_normals, mesh.facet_midpoints - mesh.centroids[plus])
        assert np.all(outward > 0.0)

    def test_plus_is_lower_index(self):
        mesh = structured_triangulation(3)
        interior = mesh.interior_facets()
        assert np.all(mesh.facet_elements[interior, 0] < mesh.facet_elements[interior, 1])
        assert np.all(mesh.facet_elements[mesh.boundary_facets(), 1] == -1)

    @pytest.mark.parametrize("wall, normal", [
        ("left", (-1.0, 0.0)),
        ("right", (1.0, 0.0)),
        ("bottom", (0.0, -1.0)),
        ("top", (0.0, 1.0)),
    ])
    def test_wall_normals(self, wall, normal):
        mesh = structured_triangulation(2)
        facets = [f for f in mesh.boundary_facets() if mesh.wall_of_facet(f) == wall]
        assert len(facets) == 2
        assert np.allclose(mesh.facet_normals[facets], normal)

    def test_facet_views(self):
        mesh = structured_triangulation(1)
        views = mesh.facets
        assert len(views) == 5
        assert sum(view.minus is None for view in views) == 4
        assert all(view.kind in ("interior", "boundary") for view in views)


class TestPeriodicIdentification:
    def test_fully_periodic(self):
        mesh = apply_periodic_identification(structured_triangulation(2), ["x1", "x2"])
        assert mesh.num_facets == 12
        assert len(mesh.boundary_facets()) == 0
        assert len(mesh.interior_facets()) == 12
        assert int(np.sum(mesh.facet_kinds == PERIODIC)) == 4

    def test_single_axis(self):
        mesh = apply_periodic_identification(structured_triangulation(2), ["x1"])
        stats = mesh_statistics(mesh)
        assert stats["num_facets"] == 14
        assert stats["num_periodic_facets"] == 2
        assert stats["num_boundary_facets"] == 4
        walls = {mesh.wall_of_facet(f) for f in mesh.boundary_facets()}
        assert walls == {"bottom", "top"}

    def test_idempotent(self):
        mesh = apply_periodic_identification(structured_triangulation(3), ["x1", "x2"])
        assert apply_periodic_identification(mesh, ["x1", "x2"]) is mesh

    def test_original_is_untouched(self):
        original = structured_triangulation(2)
        apply_periodic_identification(original, ["x1"])
        assert original.num_facets == 16
        assert int(np.sum(original.facet_kinds == BOUNDARY)) == 8

    def test_shift_points_from_plus_to_minus(self):
        mesh = apply_periodic_identification(structured_triangulation(2), ["x1", "x2"])
        periodic = np.flatnonzero(mesh.facet_kinds == PERIODIC)
        for f in periodic:
            assert np.isclose(np.abs(mesh.facet_shifts[f]).sum(), 1.0)
            # K+ の外向き法線は対向する壁への移動と逆向き
            assert mesh.facet_normals[f] @ mesh.facet_shifts[f] < 0.0

    def test_element_facets_reference_kept_facets(self):
        mesh = apply_periodic_identification(structured_triangulation(3), ["x1", "x2"])
        counts = np.bincount(mesh.element_facets.ravel(), minlength=mesh.num_facets)
        assert np.all(counts == 2)

    def test_mismatched_walls(self):
        # 左壁は 2 分割、右壁は 1 本の辺
        vertices = [[0, 0], [1, 0], [1, 1], [0, 1], [0, 0.5]]
        triangles = [[0, 1, 4], [4, 1, 2], [4, 2, 3]]
        mesh = Mesh(vertices, triangles)
        with pytest.raises(PeriodicIdentificationError) as error:
            apply_periodic_identification(mesh, ["x1"])
        assert error.value.midpoint is not None

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            apply_periodic_identification(structured_triangulation(1), ["x3"])


class TestValidation:
    def test_clockwise_triangle(self):
        with pytest.raises(MeshError):
            Mesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 2, 1], [0, 2, 3]])

    def test_area_must_be_one(self):
        with pytest.raises(MeshError):
            Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])

    def test_vertex_out_of_range(self):
        with pytest.raises(MeshError):
            Mesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 7]])

    def test_empty_statistics(self):
        with pytest.raises(MeshError):
            mesh_statistics(None)


MESH_TEXT = """hdivmesh 1
# 単位正方形を 2 つの三角形に
4
0 0
1 0
1 1
0 1
2
0 1 2
0 3 2   # 時計回り
"""


class TestMeshFile:
    def test_load(self):
        mesh = load_mesh(io.StringIO(MESH_TEXT), name="square")
        assert mesh.num_triangles == 2
        assert mesh.num_facets == 5
        assert np.all(mesh.determinants > 0.0)

    def test_write_then_load(self):
        mesh = structured_triangulation(3)
        stream = io.StringIO()
        write_mesh(mesh, stream)
        stream.seek(0)
        loaded = load_mesh(stream)
        assert np.array_equal(loaded.triangles, mesh.triangles)
        assert np.allclose(loaded.vertices, mesh.vertices)

    def test_bad_header(self):
        with pytest.raises(MeshFormatError) as error:
            load_mesh(io.StringIO("mesh 2\n4\n"))
        assert error.value.line == 1

    def test_bad_coordinate(self):
        text = MESH_TEXT.replace("1 1\n", "1 one\n")
        with pytest.raises(MeshFormatError) as error:
            load_mesh(io.StringIO(text))
        assert error.value.line == 6

    def test_vertex_index_out_of_range(self):
        text = MESH_TEXT.replace("0 1 2\n", "0 1 9\n")
        with pytest.raises(MeshFormatError):
            load_mesh(io.StringIO(text))

    def test_truncated(self):
        with pytest.raises(MeshFormatError):
            load_mesh(io.StringIO("hdivmesh 1\n4\n0 0\n"))

    def test_trailing_content(self):
        with pytest.raises(MeshFormatError):
            load_mesh(io.StringIO(MESH_TEXT + "5\n"))


class TestMeshFromSpec:
    @pytest.mark.parametrize("spec", [4, "4", "structured:4"])
    def test_structured(self, spec):
        assert mesh_from_spec(spec).num_triangles == 32

    def test_file(self, tmp_path):
        path = tmp_path / "square.mesh"
        path.write_text(MESH_TEXT, encoding="utf-8")
        assert mesh_from_spec(str(path)).num_triangles == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            mesh_from_spec(str(tmp_path / "missing.mesh"))


def test_locate_points_round_trip(rng):
    mesh = structured_triangulation(4)
    points = rng.uniform(0.0, 1.0, size=(50, 2))
    elements, reference = mesh.locate_points(points)
    assert np.allclose(mesh.map_to_physical(elements, reference), points)
    with pytest.raises(MeshError):
        mesh.locate_points(np.array([[1.5, 0.5]]))

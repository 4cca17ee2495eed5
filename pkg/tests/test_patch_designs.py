import json
import math

import cv2
import numpy as np
import pytest

from keypatch_ready.errors import InvalidArgumentError, UnsupportedFormatError
from keypatch_ready.patch_designs import (
    PatchSpec,
    RingElement,
    canonical_designs,
    classify_patch,
    designs_document,
    parse_designs_document,
    render_patch,
    rotational_similarity_matrix,
    template_bank,
    write_designs_json,
)


class TestDesignLibrary:

    def test_four_types_in_order(self):
        designs = canonical_designs()
        assert [d.type_id for d in designs] == [0, 1, 2, 3]

    def test_center_disk_and_extents(self):
        for spec in canonical_designs():
            first = spec.rings[0]
            assert first.inner_fraction == 0.0 and first.is_full_ring
            for ring in spec.rings:
                assert ring.extent == pytest.approx(math.pi) or ring.extent == pytest.approx(2 * math.pi)
                assert 0.0 <= ring.inner_fraction < ring.outer_fraction <= 1.0

    def test_quarter_extent_rejected(self):
        with pytest.raises(InvalidArgumentError):
            RingElement(0.5, 1.0, 0.0, math.pi / 2, "black")

    def test_design_needs_center_disk(self):
        ring = RingElement(0.5, 1.0, 0.0, math.pi, "black")
        with pytest.raises(InvalidArgumentError):
            PatchSpec(type_id=0, rings=(ring,))

    def test_document_round_trip(self, tmp_path):
        path = write_designs_json(str(tmp_path / "designs.json"))
        with open(path) as f:
            specs = parse_designs_document(json.load(f))
        assert specs == canonical_designs()

    def test_wrong_version_rejected(self):
        document = designs_document()
        document["version"] = 99
        with pytest.raises(UnsupportedFormatError):
            parse_designs_document(document)

    def test_designs_are_distinguishable(self):
        matrix = rotational_similarity_matrix(radius_px=64)
        off_diagonal = matrix[~np.eye(4, dtype=bool)]
        assert off_diagonal.max() < 0.95


class TestRendering:

    def test_raster_shape_and_center(self):
        raster = render_patch(canonical_designs()[0], 32)
        assert raster.pixels.shape == (65, 65)
        assert raster.pixels.dtype == np.uint8
        assert raster.center == (32.0, 32.0)

    @pytest.mark.parametrize("rotation", [0.0, 0.7, math.pi, 4.0])
    def test_center_black_corner_white(self, rotation):
        for spec in canonical_designs():
            raster = render_patch(spec, 20, black_level=30, white_level=220, rotation=rotation)
            assert raster.pixels[20, 20] == 30
            assert raster.pixels[0, 0] == 220

    def test_too_small_radius(self):
        with pytest.raises(InvalidArgumentError):
            render_patch(canonical_designs()[0], 4)

    def test_levels_outside_ranges(self):
        with pytest.raises(InvalidArgumentError):
            render_patch(canonical_designs()[0], 16, black_level=130)
        with pytest.raises(InvalidArgumentError):
            render_patch(canonical_designs()[0], 16, white_level=170)

    def test_deterministic(self):
        spec = canonical_designs()[2]
        a = render_patch(spec, 24, rotation=1.3).pixels
        b = render_patch(spec, 24, rotation=1.3).pixels
        np.testing.assert_array_equal(a, b)

    def test_without_antialias_two_levels_only(self):
        raster = render_patch(canonical_designs()[1], 16, black_level=10, white_level=200, antialias=False)
        assert set(np.unique(raster.pixels)) <= {10, 200}

    def test_scale_consistency(self):
        """Rendering at 2r then halving agrees with rendering at r away from edges."""
        spec = canonical_designs()[0]
        small = render_patch(spec, 24).pixels.astype(np.float32)
        big = render_patch(spec, 48).pixels.astype(np.float32)
        kernel = np.array([0.25, 0.5, 0.25], dtype=np.float32)
        halved = cv2.sepFilter2D(big, -1, kernel, kernel, borderType=cv2.BORDER_REFLECT)[::2, ::2]
        assert halved.shape == small.shape

        local_max = cv2.dilate(small, np.ones((3, 3), np.uint8))
        local_min = cv2.erode(small, np.ones((3, 3), np.uint8))
        uniform = local_max == local_min
        assert uniform.sum() > 0.3 * small.size
        assert np.abs(halved[uniform] - small[uniform]).max() <= 10


class TestClassification:

    def test_rotation_pi_is_still_type_zero(self):
        bank = template_bank(16)
        pixels = render_patch(canonical_designs()[0], 16, rotation=math.pi).pixels
        assert classify_patch(pixels, bank)[0] == 0

    @pytest.mark.parametrize("rotation", [0.1, 2.0, 5.5])
    def test_every_type_recognised(self, rotation):
        bank = template_bank(16)
        for spec in canonical_designs():
            pixels = render_patch(spec, 16, rotation=rotation).pixels
            type_id, score = classify_patch(pixels, bank)
            assert type_id == spec.type_id
            assert score > 0.8

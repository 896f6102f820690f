import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldct.errors import ConfigurationError, ValidationError
from ldct.geometry import (CTImage, MU_WATER, ScanGeometry, Sinogram, backproject, fan_filter_kernel,
                           fbp_reconstruct, forward_project, hu_to_mu, mu_to_hu, reconstruction_mask)
from ldct.metrics import evaluate
from ldct.phantom import Ellipse, PhantomSpec, generate


def small_geometry(n=32, views=60, bins=None):
    return ScanGeometry.for_image(n, views, bins, field_of_view=n * 0.68359375)


def test_hu_map_fixed_points():
    assert mu_to_hu(MU_WATER) == 0.0
    assert mu_to_hu(0.0) == -1000.0
    assert hu_to_mu(mu_to_hu(0.0314)) == pytest.approx(0.0314, rel=1e-15)


def test_default_geometry_is_clinical_protocol():
    g = ScanGeometry()
    assert (g.source_to_center, g.detector_to_center) == (1361.2, 615.18)
    assert g.sinogram_shape == (720, 720)
    assert g.image_shape == (512, 512)
    assert g.is_full_scan


def test_geometry_validation_errors():
    with pytest.raises(ConfigurationError):
        ScanGeometry(source_to_center=-1.0)
    with pytest.raises(ValidationError):
        ScanGeometry(num_views=1)
    with pytest.raises(ConfigurationError, match="fan"):
        ScanGeometry(num_detector_bins=10)


def test_geometry_dict_round_trip():
    g = small_geometry()
    assert ScanGeometry.from_dict(g.to_dict()) == g
    assert g.to_dict()["detector_layout"] == "equiangular-arc"


def test_sinogram_rejects_bad_shape_and_nan():
    g = small_geometry()
    with pytest.raises(ConfigurationError):
        Sinogram(np.zeros((3, 3)), g)
    bad = np.zeros(g.sinogram_shape)
    bad[0, 0] = np.nan
    with pytest.raises(ValidationError):
        Sinogram(bad, g)


def test_forward_project_shape_mismatch():
    g = small_geometry()
    with pytest.raises(ConfigurationError):
        forward_project(np.zeros((16, 16)), g)


def test_zero_image_projects_to_zero():
    g = small_geometry()
    assert np.all(forward_project(np.zeros(g.image_shape), g).data == 0.0)


def test_disk_chords_match_analytic_line_integrals():
    # odd bin count puts one ray through the centre
    n = 128
    g = ScanGeometry.for_image(n, 8, 193, field_of_view=n * 0.68359375)
    radius_unit = 0.5
    disk = generate(PhantomSpec("shepp-logan", n, ellipses=[Ellipse(1.0, radius_unit, radius_unit)], supersample=8))
    sino = forward_project(disk, g).data
    R = radius_unit * 0.5 * n * g.pixel_spacing
    p = g.source_to_center * np.sin(g.fan_angles())
    chord = 2.0 * np.sqrt(np.maximum(R ** 2 - p ** 2, 0.0)) * MU_WATER
    centre = g.num_detector_bins // 2
    err = np.abs(sino[:, centre] / chord[centre] - 1.0)
    # views along the pixel axes see the rasterised disk edge-on
    assert np.all(err[::2] < 1e-3)
    # diagonal views pick up the staircase of the rasterised boundary
    assert np.all(err < 3e-3)
    inner = np.abs(p) < 0.8 * R
    assert np.max(np.abs(sino[:, inner] / chord[None, inner] - 1.0)) < 5e-3


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_backproject_is_adjoint_of_forward_project(seed):
    g = small_geometry(24, 30)
    r = np.random.default_rng(seed)
    x = r.standard_normal(g.image_shape)
    y = r.standard_normal(g.sinogram_shape)
    lhs = float(np.sum(forward_project(x, g).data * y))
    rhs = float(np.sum(x * backproject(y, g)))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_ramp_kernel_taps():
    dg = 1e-3
    k = fan_filter_kernel(5, dg)
    centre = len(k) // 2
    assert k[centre] == pytest.approx(1 / (8 * dg ** 2))
    assert k[centre + 2] == 0.0 and k[centre - 2] == 0.0
    assert k[centre + 1] == pytest.approx(-1 / (2 * math.pi ** 2 * math.sin(dg) ** 2))


def test_fbp_of_uniform_disk_recovers_value():
    n = 64
    g = ScanGeometry.for_image(n, 360, field_of_view=n * 0.68359375)
    disk = generate(PhantomSpec("shepp-logan", n, ellipses=[Ellipse(1.0, 0.6, 0.6)], supersample=8))
    rec = fbp_reconstruct(forward_project(disk, g))
    c = n // 2
    centre = rec.data[c - 6:c + 6, c - 6:c + 6]
    assert abs(centre.mean() / MU_WATER - 1.0) < 0.01


def test_fbp_psnr_increases_with_views():
    n = 64
    ph = generate(PhantomSpec("shepp-logan", n))
    mask = reconstruction_mask(ScanGeometry.for_image(n, 30, field_of_view=n * 0.68359375))
    scores = []
    for v in (30, 90, 270):
        g = ScanGeometry.for_image(n, v, field_of_view=n * 0.68359375)
        scores.append(evaluate(fbp_reconstruct(forward_project(ph, g)), ph, mask=mask, metrics=()).psnr)
    assert scores[0] < scores[1] < scores[2]


def test_fbp_requires_full_scan():
    g = ScanGeometry.for_image(32, 40, angular_range=math.pi, field_of_view=32 * 0.68359375)
    with pytest.raises(ConfigurationError, match="360"):
        fbp_reconstruct(Sinogram(np.zeros(g.sinogram_shape), g))


def test_ctimage_validation():
    with pytest.raises(ValidationError):
        CTImage(np.zeros(4))
    img = CTImage.from_hu(np.zeros((2, 2)))
    assert np.allclose(img.data, MU_WATER)

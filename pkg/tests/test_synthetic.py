import math

import numpy as np
import pytest

from panelnet.errors import ConfigError
from panelnet.losses import boundary_to_horizon_depth
from panelnet.panels import PanelConfig, partition_erp
from panelnet.synthetic import (CEILING, FLOOR, FURNITURE, WALL, RoomScene, augment, cast_rays,
                                render_erp, rotate_columns, sample_room, wall_distance)


def _dir(phi, theta):
    return np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])


CENTERED = RoomScene(2.0, 2.0, 2.0, 1.0, 1.0, 1.0)


def test_centered_room_analytics():
    assert cast_rays(CENTERED, _dir(0, math.pi / 2))[0] == pytest.approx(1.0)
    assert cast_rays(CENTERED, _dir(math.pi / 4, math.pi / 2))[0] == pytest.approx(math.sqrt(2))
    assert cast_rays(CENTERED, _dir(0.3, 1e-9))[0] == pytest.approx(1.0)
    depth, label, _, _ = cast_rays(CENTERED, _dir(0.3, math.pi - 1e-9))
    assert depth == pytest.approx(1.0) and label == FLOOR


def test_ceiling_directly_above():
    scene = RoomScene(5.0, 4.0, 3.1, 2.0, 1.0, 1.4)
    depth, label, _, _ = cast_rays(scene, _dir(1.0, 0.0))
    assert depth == pytest.approx(3.1 - 1.4) and label == CEILING


def test_determinism():
    assert sample_room(7, furniture=2) == sample_room(7, furniture=2)
    a, b = render_erp(sample_room(7), 64, 32), render_erp(sample_room(7), 64, 32)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)


def test_no_furniture_labels():
    s = render_erp(sample_room(3), 128, 64)
    assert set(np.unique(s.semantics)) <= {CEILING, FLOOR, WALL}


def test_furniture_labels_present():
    s = render_erp(sample_room(3, furniture=3), 128, 64)
    assert FURNITURE in np.unique(s.semantics)


def test_invariant_sweep():
    for seed in range(1000):
        scene = sample_room(seed, furniture=seed % 4)
        assert 0.2 <= scene.cx <= scene.width - 0.2 and 0.2 <= scene.cy <= scene.length - 0.2
        assert 0 < scene.camera_height < scene.height
        s = render_erp(scene, 64, 32)
        assert np.all(s.depth > 0.2)
        assert np.all(s.depth <= scene.diagonal)
        assert np.all((s.boundary > math.pi / 2) & (s.boundary < math.pi))
        assert s.rgb.min() >= 0 and s.rgb.max() <= 1


@pytest.mark.parametrize("seed", range(5))
def test_boundary_matches_equator_depth(seed):
    scene = sample_room(seed)
    h = 128
    s = render_erp(scene, 256, h)
    row = h // 2
    theta = math.pi * (row + 0.5) / h
    horizontal = s.depth[0, row] * math.sin(theta)
    assert np.allclose(boundary_to_horizon_depth(s.boundary, scene.camera_height), horizontal, atol=1e-4)
    phi = 2 * math.pi * (np.arange(256) + 0.5) / 256 - math.pi
    assert np.allclose(boundary_to_horizon_depth(s.boundary, scene.camera_height),
                       wall_distance(scene, phi), atol=1e-9)


def test_resolution_consistency():
    scene = sample_room(11, furniture=2)
    lo = render_erp(scene, 64, 32)
    hi = render_erp(scene, 192, 96)
    # pixel 3x+1 of the 3x render shares its center with pixel x of the 1x render
    sub = (slice(None), slice(1, None, 3), slice(1, None, 3))
    assert np.array_equal(hi.semantics[sub], lo.semantics)
    assert np.allclose(hi.depth[sub], lo.depth, rtol=1e-6)


def test_range_errors():
    with pytest.raises(ConfigError):
        sample_room(0, {"width": (5, 2)})
    with pytest.raises(ConfigError):
        sample_room(0, {"camera_height": (1.2, 2.6)})
    with pytest.raises(ConfigError):
        sample_room(0, furniture=4)
    with pytest.raises(ConfigError):
        render_erp(sample_room(0), 100, 50)
    with pytest.raises(ConfigError):
        RoomScene(2.0, 2.0, 2.0, 0.1, 1.0, 1.0)


def test_augment_identities():
    s = render_erp(sample_room(2), 64, 32)
    r = augment(s, {"rotate": 64})
    assert np.array_equal(r.rgb, s.rgb) and np.array_equal(r.boundary, s.boundary)
    f = augment(augment(s, {"flip": True}), {"flip": True})
    assert np.array_equal(f.depth, s.depth) and np.array_equal(f.boundary, s.boundary)
    g = augment(s, {"gamma": 1.7})
    assert np.array_equal(g.depth, s.depth) and np.array_equal(g.semantics, s.semantics)
    assert np.allclose(g.rgb, s.rgb ** 1.7, rtol=1e-6)
    with pytest.raises(ConfigError):
        augment(s, {"gamma": 3.0})


def test_flip_mirrors_boundary():
    s = render_erp(sample_room(4), 64, 32)
    f = augment(s, {"flip": True})
    assert np.array_equal(f.boundary, s.boundary[::-1])
    assert np.array_equal(f.depth[..., 0], s.depth[..., -1])


@pytest.mark.parametrize("k", [1, 4, 7])
def test_rotation_shifts_panels(k):
    cfg = PanelConfig(32, 8, 64, 32)
    s = render_erp(sample_room(5), 64, 32)
    r = augment(s, {"rotate": k * 8})
    assert np.array_equal(partition_erp(r.rgb, cfg).panels,
                          np.roll(partition_erp(s.rgb, cfg).panels, -k, axis=0))
    assert np.array_equal(r.boundary, rotate_columns(s.boundary, k * 8))


def test_random_augment_is_seeded():
    s = render_erp(sample_room(4), 64, 32)
    a = augment(s, ("flip", "rotate", "gamma"), seed=5, rotate_unit=8)
    b = augment(s, ("flip", "rotate", "gamma"), seed=5, rotate_unit=8)
    assert np.array_equal(a.rgb, b.rgb)

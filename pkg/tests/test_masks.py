import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lvnc.errors import ContractError, UndefinedPTAError
from lvnc.masks import (EL, IC, T, PtaResult, RegionAreas, connected_components, fidelity_filter,
                        mask_pta, pta, region_areas, resample_mask)
from oracles import flood_fill_count

masks16 = arrays(np.uint8, (16, 16), elements=st.integers(0, 3))


def test_region_areas_counts_labels():
    m = np.array([[0, 1, 1], [2, 3, 3], [3, 0, 2]], dtype=np.uint8)
    assert region_areas(m) == RegionAreas(TA=3, ELA=2, ICA=2)


@pytest.mark.parametrize("ta,ela,value,positive", [
    (274, 726, 27.4, True),
    (273, 727, 27.3, False),
    (1, 0, 100.0, True),
    (0, 5, 0.0, False),
    (137, 363, 27.4, True),
])
def test_pta_values_and_inclusive_threshold(ta, ela, value, positive):
    r = pta(RegionAreas(TA=ta, ELA=ela, ICA=0))
    assert r.pta == pytest.approx(value, abs=1e-12)
    assert r.positive is positive


def test_pta_undefined_without_myocardium():
    with pytest.raises(UndefinedPTAError):
        pta(RegionAreas(TA=0, ELA=0, ICA=10))


def test_from_value_uses_same_threshold():
    assert PtaResult.from_value(27.4).positive
    assert not PtaResult.from_value(27.399).positive


@settings(max_examples=60, deadline=None)
@given(masks16)
def test_pta_of_mask_matches_counting(m):
    ta, ela = int((m == T).sum()), int((m == EL).sum())
    if ta + ela == 0:
        with pytest.raises(UndefinedPTAError):
            mask_pta(m)
    else:
        r = mask_pta(m)
        assert r.pta == pytest.approx(100 * ta / (ta + ela))
        assert 0 <= r.pta <= 100


@settings(max_examples=80, deadline=None)
@given(masks16, st.sampled_from([EL, IC, T]))
def test_connected_components_match_flood_fill(m, label):
    count, ids = connected_components(m, label)
    assert count == flood_fill_count(m == label)
    assert set(np.unique(ids[m == label])) <= set(range(1, count + 1))
    assert (ids[m != label] == 0).all()


def test_diagonal_touch_is_one_component():
    m = np.zeros((4, 4), dtype=np.uint8)
    m[0, 0] = m[1, 1] = T
    assert connected_components(m, T)[0] == 1


def test_check_mask_rejects_bad_input():
    with pytest.raises(ContractError):
        region_areas(np.zeros((2, 2, 2), dtype=np.uint8))
    with pytest.raises(ContractError):
        region_areas(np.full((2, 2), 4))


def test_resample_block_constant_is_exact():
    small = np.random.default_rng(0).integers(0, 4, (8, 8)).astype(np.uint8)
    big = np.kron(small, np.ones((4, 4), dtype=np.uint8))
    np.testing.assert_array_equal(resample_mask(big, 8), small)
    np.testing.assert_array_equal(resample_mask(small, 32), big)


def test_resample_samples_pixel_centre():
    m = np.arange(4, dtype=np.uint8).reshape(1, 4) % 4
    # output i -> source floor((i + 0.5) * 4 / 2) = 1, 3
    assert resample_mask(m, (1, 2)).tolist() == [[1, 3]]


def _ring_with_trabeculae():
    m = np.zeros((64, 64), dtype=np.uint8)
    yy, xx = np.mgrid[:64, :64]
    r = np.hypot(yy - 31.5, xx - 31.5)
    m[r < 20] = IC
    m[(r >= 20) & (r < 26)] = EL
    m[20:28, 20:28] = T
    m[36:44, 36:44] = T
    return m


def test_fidelity_keeps_faithful_resampling():
    m = _ring_with_trabeculae()
    big = np.kron(m, np.ones((2, 2), dtype=np.uint8))
    d = fidelity_filter(big, resample_mask(big, 64))
    assert d.keep and d.reasons == []
    assert all(v == 0 for v in d.errors.values())
    assert d.components == (2, 2)


def test_fidelity_flags_area_errors_and_topology():
    m = _ring_with_trabeculae()
    changed = m.copy()
    changed[36:44, 36:44] = IC
    d = fidelity_filter(m, changed)
    assert not d.keep
    assert "T error" in d.reasons and "PTA error" in d.reasons and "topology" in d.reasons
    assert d.errors["T"] == pytest.approx(0.5)


def test_fidelity_tolerance_is_inclusive():
    m = np.full((10, 10), IC, dtype=np.uint8)
    m[0, :] = EL
    m[1, :] = EL
    m[2, :] = T
    m[3, :] = T
    other = m.copy()
    # T percentage 20 -> 21: relative error 0.05 exactly
    other[4, 0] = T
    d = fidelity_filter(m, other)
    assert d.errors["T"] == pytest.approx(0.05)
    assert "T error" not in d.reasons


def test_fidelity_undefined_pta():
    m = np.full((4, 4), IC, dtype=np.uint8)
    d = fidelity_filter(m, m)
    assert not d.keep and d.reasons == ["undefined PTA"]

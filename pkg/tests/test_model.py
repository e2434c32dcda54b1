import numpy as np
import pytest

from app.data.model import (
    LESION,
    ORGAN,
    Box2D,
    BoxClass,
    BoxSet,
    CtVolume,
    PseudoSample,
    SegMask,
    SliceTriplet,
    StrongSample,
    boxes_from_mask,
    split_dataset,
    strong_to_weak,
)


def _volume(shape=(4, 16, 16), **kw) -> CtVolume:
    return CtVolume(np.zeros(shape, dtype=np.int16), (2.5, 0.8, 0.8), "c0", **kw)


# =========================================================
# VOLUMES / MASKS
# =========================================================

@pytest.mark.parametrize("shape", [(16, 16), (2, 16, 16), (4, 15, 16)])
def test_volume_shape_limits(shape):
    with pytest.raises(ValueError):
        _volume(shape)


def test_volume_rejects_float_voxels_and_bad_spacing():
    with pytest.raises(ValueError, match="integer"):
        CtVolume(np.zeros((4, 16, 16), dtype=np.float32), (1, 1, 1), "c")
    with pytest.raises(ValueError, match="spacing"):
        CtVolume(np.zeros((4, 16, 16), dtype=np.int16), (1, 0, 1), "c")


def test_truncated_flag_is_checked():
    vox = np.zeros((4, 16, 16), dtype=np.int16)
    vox[0, 0, 0] = 900
    with pytest.raises(ValueError, match="truncated"):
        CtVolume(vox, (1, 1, 1), "c", truncated=True)


def test_arrays_are_read_only():
    vol = _volume()
    with pytest.raises(ValueError):
        vol.voxels[0, 0, 0] = 1


def test_mask_values_and_pairing():
    with pytest.raises(ValueError):
        SegMask(np.full((4, 16, 16), 3, dtype=np.uint8), "c")
    mask = SegMask(np.zeros((4, 16, 17), dtype=np.uint8), "c")
    with pytest.raises(ValueError, match="shape"):
        mask.check_pair(_volume())


# =========================================================
# BOXES
# =========================================================

def test_box_is_half_open_and_validated():
    b = Box2D(0, "organ", 1, 2, 4, 6)
    assert b.cls is BoxClass.ORGAN
    assert (b.width, b.height, b.area) == (3, 4, 12)
    assert b.within(6, 4) and not b.within(5, 4)
    with pytest.raises(ValueError):
        Box2D(0, BoxClass.ORGAN, 3, 0, 3, 2)
    with pytest.raises(ValueError):
        Box2D(0, BoxClass.ORGAN, -1, 0, 3, 2)


def test_box_clip():
    b = Box2D(0, BoxClass.LESION, 10, 10, 20, 20)
    assert b.clipped(15, 12) == Box2D(0, BoxClass.LESION, 10, 10, 12, 15)
    assert b.clipped(8, 8) is None


def test_boxes_from_mask_organ_encloses_lesion():
    m = np.zeros((8, 8), dtype=np.uint8)
    m[1:5, 1:6] = ORGAN
    m[2:4, 2:4] = LESION
    boxes = boxes_from_mask(m, slice_index=3)
    assert boxes == [
        Box2D(3, BoxClass.ORGAN, 1, 1, 6, 5),
        Box2D(3, BoxClass.LESION, 2, 2, 4, 4),
    ]
    assert boxes[0].contains(boxes[1])


def test_boxes_from_mask_uses_4_connectivity():
    m = np.zeros((4, 4), dtype=np.uint8)
    m[0, 0] = ORGAN
    m[1, 1] = ORGAN
    assert len(boxes_from_mask(m)) == 2
    assert boxes_from_mask(np.zeros((4, 4), dtype=np.uint8)) == []


def test_boxset_orders_and_groups():
    boxes = BoxSet((
        Box2D(2, BoxClass.LESION, 1, 1, 2, 2),
        Box2D(0, BoxClass.ORGAN, 0, 0, 4, 4),
        Box2D(2, BoxClass.ORGAN, 0, 0, 4, 4),
    ), "c")
    assert boxes.slice_indices() == [0, 2]
    assert [b.cls for b in boxes.for_slice(2)] == [BoxClass.ORGAN, BoxClass.LESION]
    assert boxes.for_slice(1) == ()
    assert len(boxes.of_class(BoxClass.ORGAN)) == 2
    assert BoxSet.from_json(boxes.to_json(), "c") == boxes
    with pytest.raises(ValueError, match="outside"):
        boxes.check_bounds(3, 3)


def test_boxset_from_mask_covers_every_slice():
    lab = np.zeros((3, 16, 16), dtype=np.uint8)
    lab[1, 4:8, 4:10] = ORGAN
    boxes = BoxSet.from_mask(SegMask(lab, "c"))
    assert boxes.slice_indices() == [1]
    assert boxes.boxes[0] == Box2D(1, BoxClass.ORGAN, 4, 4, 10, 8)


# =========================================================
# SAMPLES
# =========================================================

def test_samples_validate_shapes():
    trip = SliceTriplet(np.zeros((3, 16, 16), dtype=np.float32), 1)
    with pytest.raises(ValueError):
        SliceTriplet(np.zeros((2, 16, 16)), 0)
    with pytest.raises(ValueError):
        StrongSample(trip, np.zeros((16, 8), dtype=np.uint8), ())
    strong = StrongSample(trip, np.zeros((16, 16), dtype=np.uint8), [Box2D(1, "organ", 0, 0, 2, 2)])
    weak = strong_to_weak(strong)
    assert weak.image is strong.image and weak.boxes == strong.boxes


def test_pseudo_sample_requires_simplex():
    trip = SliceTriplet(np.zeros((3, 16, 16), dtype=np.float32), 1)
    q = np.full((3, 16, 16), 1 / 3, dtype=np.float32)
    PseudoSample(trip, q, ())
    with pytest.raises(ValueError, match="simplex"):
        PseudoSample(trip, q * 2, ())
    with pytest.raises(ValueError):
        PseudoSample(trip, q[:, :8], ())


# =========================================================
# SPLIT
# =========================================================

IDS = [f"case_{i:02d}" for i in range(10)]


def test_split_sizes_and_partition():
    strong, weak, val = split_dataset(IDS, (30, 60, 10), seed=0)
    assert (len(strong), len(weak), len(val)) == (3, 6, 1)
    assert sorted(strong + weak + val) == IDS
    assert split_dataset(IDS, (30, 60, 10), seed=0) == (strong, weak, val)
    assert split_dataset(IDS, (30, 60, 10), seed=1) != (strong, weak, val)


def test_split_rounds_half_up():
    strong, weak, val = split_dataset(IDS[:5], (30, 60, 10), seed=0)
    assert (len(strong), len(weak), len(val)) == (2, 2, 1)


def test_validation_ids_stable_across_ratios():
    _, _, val_a = split_dataset(IDS, (10, 80, 10), seed=4)
    _, _, val_b = split_dataset(IDS, (70, 20, 10), seed=4)
    assert val_a == val_b


def test_full_supervision_ratio_has_no_weak_part():
    strong, weak, val = split_dataset(IDS, (90, 0, 10), seed=0)
    assert weak == [] and len(strong) == 9 and len(val) == 1


def test_split_errors():
    with pytest.raises(ValueError, match="rounds to 0"):
        split_dataset(IDS[:3], (10, 80, 10), seed=0)
    with pytest.raises(ValueError, match="duplicate"):
        split_dataset(["a", "a", "b"], (30, 60, 10), seed=0)
    with pytest.raises(ValueError):
        split_dataset(IDS, (30, 60, 20), seed=0)

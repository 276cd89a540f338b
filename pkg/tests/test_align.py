import numpy as np
import pytest

from lvmesh import align
from lvmesh.align import AlignError, centroid2d, correct
from lvmesh.phantom import LABEL_LV_POOL, inject_misalignment
from lvmesh.volume import LabelVolume


def test_centroid2d_single_voxel():
    mask = np.zeros((8, 8), dtype=np.int32)
    mask[3, 5] = 2
    cx, cy = centroid2d(mask, 2, spacing=(0.5, 2.0), origin=(1.0, -1.0))
    assert cx == pytest.approx(1.0 + 5 * 0.5)
    assert cy == pytest.approx(-1.0 + 3 * 2.0)


def test_centroid2d_absent_label():
    assert centroid2d(np.zeros((4, 4), dtype=np.int32), 3) is None


def test_correct_recovers_injected_misalignment(small_phantom):
    _, frames, labels, _ = small_phantom
    bad_frames, bad_labels, applied = inject_misalignment(frames, labels, 2.5, seed=21)
    fixed_frames, fixed_labels, shifts = correct(bad_frames, bad_labels)
    # on slices that contain the LV pool the correction must undo the
    # injected shift up to the 1-voxel quantization of the centroid estimate
    for t in range(frames.n_frames):
        for k in range(frames[0].data.shape[0]):
            if np.any(bad_labels[t].data[k] == LABEL_LV_POOL):
                err = applied[t, k] + shifts[t, k]
                assert np.abs(err).max() <= 1, (t, k, err)


def test_correct_improves_pool_overlap(small_phantom):
    _, frames, labels, _ = small_phantom
    bad_frames, bad_labels, _ = inject_misalignment(frames, labels, 2.5, seed=22)
    _, fixed_labels, _ = correct(bad_frames, bad_labels)

    def overlap(lbls):
        a = lbls[0].data == LABEL_LV_POOL
        b = lbls[3].data == LABEL_LV_POOL
        return 2 * np.logical_and(a, b).sum() / (a.sum() + b.sum())

    assert overlap(fixed_labels) > overlap(bad_labels)


def test_correct_is_idempotent(small_phantom):
    _, frames, labels, _ = small_phantom
    bad_frames, bad_labels, _ = inject_misalignment(frames, labels, 2.0, seed=23)
    f1, l1, _ = correct(bad_frames, bad_labels)
    from lvmesh.volume import FrameSequence
    f2, l2, shifts2 = correct(FrameSequence(list(f1)), l1)
    assert np.abs(shifts2).max() <= 1


def test_correct_missing_label_raises(small_phantom):
    _, frames, labels, _ = small_phantom
    empty = [LabelVolume(np.zeros_like(l.data), l.spacing, l.origin) for l in labels]
    with pytest.raises(AlignError):
        correct(frames, empty)


def test_unlabeled_slices_inherit_nearest_shift():
    vals = [None, (1.0, 2.0), None, (3.0, 4.0), None]
    filled = align._fill_nearest(vals)
    assert filled[0] == (1.0, 2.0)
    assert filled[2] in ((1.0, 2.0), (3.0, 4.0))
    assert filled[4] == (3.0, 4.0)

"""Small on-disk annotation + volume fixtures for preparation tests."""

import numpy as np

from nodulenet.data import NoduleRecord, write_annotations, write_volume

SCAN_SHAPE = (40, 40, 12)
SMALL = (8, 8, 2)
LARGE = (16, 16, 4)


def write_prep_fixture(root):
    """Three scans and 14 annotated nodules.

    ``clean`` holds 10 keepable nodules (5 benign, 5 malignant, one with a
    zero grade). ``thick`` has non-uniform slice thickness, ``gappy`` a missing
    slice near its nodule. Two more nodules on ``clean`` are excluded by
    their grades.
    """
    vols = root / "volumes"
    rng = np.random.default_rng(0)
    hu = rng.uniform(-1000, 400, SCAN_SHAPE).astype(np.float32)
    nz = SCAN_SHAPE[2]
    write_volume(vols, "clean", hu, [1.25] * nz, [1.25 * i for i in range(nz)])
    write_volume(vols, "thick", hu, [1.25] * (nz - 1) + [2.5])
    gap = [1.25 * i for i in range(nz)]
    gap[6:] = [p + 2.5 for p in gap[6:]]
    write_volume(vols, "gappy", hu, [1.25] * nz, gap)

    records = []
    for i in range(10):
        grades = [1, 2, 2, 0] if i < 5 else [4, 5, 5, 4]
        if i == 0:
            grades = [2, 1, 0, 2]
        records.append(NoduleRecord(f"n{i:02d}", "clean", (5 + 3 * i, 20, 6), grades))
    records.append(NoduleRecord("median3", "clean", (20, 20, 6), [3, 3, 4, 0]))
    records.append(NoduleRecord("fewraters", "clean", (20, 20, 6), [5, 4, 0, 0]))
    records.append(NoduleRecord("nonuniform", "thick", (20, 20, 6), [5, 5, 4, 4]))
    records.append(NoduleRecord("missing", "gappy", (20, 20, 6), [1, 1, 2, 2]))
    write_annotations(root / "annotations.csv", records)
    return root / "annotations.csv", vols

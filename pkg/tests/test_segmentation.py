import numpy as np
import pytest

from graphfpn import segmentation as seg
from graphfpn.numerics import ContractError
from graphfpn.segmentation import Image, adjacency, build_merge_tree, extract_hierarchy


def checkerboard(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return Image(rng.uniform(size=(h, w, 3)))


# ---------------------------------------------------------------------------
# merge tree


def test_uniform_2x2_merges_at_zero_cost():
    tree = build_merge_tree(Image(np.full((2, 2, 3), 0.25)))
    assert len(tree.merges) == 3
    assert all(m.cost == 0.0 for m in tree.merges)
    part = seg._MergeForest(tree)
    part.advance_to(3)
    final = part.label_map(2, 2)
    assert final.count == 1


def test_black_white_pair_cost_by_hand():
    # color term: |(0,0,0)-(1,1,1)| / sqrt(3) = 1
    # boundary term: Sobel magnitude is 4 at both pixels -> mean 4
    img = Image(np.stack([np.zeros((1, 3)), np.ones((1, 3))]).reshape(2, 1, 3))
    tree = build_merge_tree(img)
    assert len(tree.merges) == 1
    assert tree.merges[0].cost == pytest.approx(1.0 + 4.0, abs=1e-12)


def test_final_partition_is_single_region():
    for seed in range(3):
        img = checkerboard(9, 11, seed)
        tree = build_merge_tree(img)
        assert len(tree.merges) == tree.n0 - 1
        forest = seg._MergeForest(tree)
        forest.advance_to(tree.n0 - 1)
        assert forest.label_map(9, 11).count == 1


def test_merge_tree_deterministic():
    img = checkerboard(10, 10, seed=3)
    t1 = build_merge_tree(img)
    t2 = build_merge_tree(img)
    assert t1.merges == t2.merges


def test_fast_builder_matches_exhaustive_reference():
    # the lazy best-pair heap must reproduce the reference merge sequence
    # exactly, including tie-heavy inputs
    cases = [checkerboard(12, 9, seed=s) for s in range(6)]
    cases.append(Image(np.full((8, 8, 3), 0.5)))  # all ties
    flat = np.zeros((8, 8, 3))
    flat[:, 4:] = 1.0  # two flat halves, ties within each
    cases.append(Image(flat))
    quantized = np.round(checkerboard(10, 10, seed=7).rgb * 4) / 4  # repeated costs
    cases.append(Image(quantized))
    for img in cases:
        fast = build_merge_tree(img)
        ref = seg.build_merge_tree_reference(img)
        assert fast.merges == ref.merges


def test_partition_count_at_sampled_steps():
    img = checkerboard(8, 8, seed=4)
    tree = build_merge_tree(img)
    forest = seg._MergeForest(tree)
    for t in (0, 1, 7, 30, 63):
        forest.advance_to(t)
        part = forest.label_map(8, 8)
        assert part.count == tree.n0 - t
        part.validate()


# ---------------------------------------------------------------------------
# hierarchy extraction


def test_level_counts_256():
    img = checkerboard(16, 16, seed=5)
    h = extract_hierarchy(build_merge_tree(img), 256)
    assert h.level_counts == [256, 64, 16, 4, 1]


def test_level_counts_100_ceil_rule():
    img = checkerboard(12, 12, seed=6)
    h = extract_hierarchy(build_merge_tree(img), 100)
    assert h.level_counts == [100, 25, 7, 2, 1]


def test_degenerate_n1():
    img = checkerboard(8, 8, seed=7)
    h = extract_hierarchy(build_merge_tree(img), 1)
    assert h.level_counts == [1, 1, 1, 1, 1]
    for pm in h.parents:
        assert np.array_equal(pm, [0])


def test_n_out_of_range():
    tree = build_merge_tree(checkerboard(8, 8, seed=8))
    with pytest.raises(ContractError):
        extract_hierarchy(tree, 0)
    with pytest.raises(ContractError):
        extract_hierarchy(tree, 65)


def test_nesting_and_validity():
    img = checkerboard(13, 9, seed=9)
    h = extract_hierarchy(build_merge_tree(img), 40)
    for part in h.levels:
        part.validate()
    for i in range(4):
        fine, coarse = h.levels[i], h.levels[i + 1]
        for r in range(fine.count):
            parent = h.parents[i][r]
            member_parents = coarse.labels.reshape(-1)[fine.pixels[r]]
            assert np.all(member_parents == parent)


def test_regions_are_4_connected():
    img = checkerboard(10, 10, seed=10)
    h = extract_hierarchy(build_merge_tree(img), 25)
    for part in h.levels:
        lab = part.labels
        for r in range(part.count):
            mask = lab == r
            # BFS flood fill from the first member must reach every member
            ys, xs = np.where(mask)
            seen = np.zeros_like(mask)
            stack = [(ys[0], xs[0])]
            seen[ys[0], xs[0]] = True
            while stack:
                y, x = stack.pop()
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < lab.shape[0] and 0 <= nx < lab.shape[1]:
                        if mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            assert seen.sum() == mask.sum()


# ---------------------------------------------------------------------------
# adjacency


def test_adjacency_half_split():
    labels = np.zeros((4, 4), dtype=np.int64)
    labels[:, 2:] = 1
    part = seg.Partition(labels, 2, [np.where(labels.reshape(-1) == r)[0] for r in range(2)])
    nbrs = adjacency(part)
    assert nbrs == [{1}, {0}]


def test_adjacency_single_region():
    labels = np.zeros((3, 3), dtype=np.int64)
    part = seg.Partition(labels, 1, [np.arange(9)])
    assert adjacency(part) == [set()]


def test_adjacency_matches_pixel_scan_oracle():
    rng = np.random.default_rng(11)
    img = Image(rng.uniform(size=(16, 16, 3)))
    h = extract_hierarchy(build_merge_tree(img), 30)
    part = h.levels[0]
    got = adjacency(part)
    expected = [set() for _ in range(part.count)]
    lab = part.labels
    for y in range(16):
        for x in range(16):
            for dy, dx in ((0, 1), (1, 0)):
                ny, nx = y + dy, x + dx
                if ny < 16 and nx < 16 and lab[y, x] != lab[ny, nx]:
                    expected[lab[y, x]].add(int(lab[ny, nx]))
                    expected[lab[ny, nx]].add(int(lab[y, x]))
    assert got == expected


# ---------------------------------------------------------------------------
# ppm and json round trips


def test_ppm_roundtrip(tmp_path):
    img = checkerboard(8, 12, seed=12)
    path = tmp_path / "img.ppm"
    seg.save_ppm(img, path)
    loaded = seg.load_ppm(path)
    assert loaded.height == 8 and loaded.width == 12
    assert np.max(np.abs(loaded.rgb - img.rgb)) <= 0.5 / 255.0


def test_ppm_rejects_small_images(tmp_path):
    img = Image(np.zeros((4, 4, 3)))
    path = tmp_path / "small.ppm"
    seg.save_ppm(img, path)
    with pytest.raises(ContractError):
        seg.load_ppm(path)


def test_ppm_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P3\n8 8\n255\n")
    with pytest.raises(ContractError):
        seg.load_ppm(path)


def test_hierarchy_json_roundtrip(tmp_path):
    img = checkerboard(8, 8, seed=13)
    h = extract_hierarchy(build_merge_tree(img), 16)
    path = tmp_path / "h.json"
    seg.save_hierarchy(h, path)
    back = seg.load_hierarchy(path)
    assert back.level_counts == h.level_counts
    for a, b in zip(back.levels, h.levels):
        assert np.array_equal(a.labels, b.labels)
    for a, b in zip(back.parents, h.parents):
        assert np.array_equal(a, b)


def test_image_clamps_values():
    img = Image(np.array([[[2.0, -1.0, 0.5]]]))
    assert np.array_equal(img.rgb, [[[1.0, 0.0, 0.5]]])

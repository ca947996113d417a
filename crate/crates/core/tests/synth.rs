use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use legoformer::cp_fit::{cp_fit_oracle, DEFAULT_ITERATIONS};
use legoformer::image::GrayImage;
use legoformer::synth::{
    build_dataset, generate_shape, render_view, Archetype, Dataset, DatasetConfig, RenderMode,
    Split,
};
use legoformer::OccupancyGrid;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn union_oracle(n: usize, boxes: &[legoformer::synth::VoxelBox]) -> OccupancyGrid {
    OccupancyGrid::from_fn(n, |z, y, x| {
        boxes.iter().any(|b| b.contains([z, y, x])) as u8 as f32
    })
}

#[test]
fn archetypes_have_expected_box_counts() {
    for seed in 0..20 {
        let (spec, _) = generate_shape(seed, Archetype::Slab, 16).unwrap();
        assert_eq!(spec.boxes.len(), 1);
        let (spec, _) = generate_shape(seed, Archetype::LShape, 16).unwrap();
        assert_eq!(spec.boxes.len(), 2);
        let (spec, _) = generate_shape(seed, Archetype::Chair, 16).unwrap();
        assert_eq!(spec.boxes.len(), 6);
        let (spec, _) = generate_shape(seed, Archetype::Table, 16).unwrap();
        assert!(
            (3..=5).contains(&spec.boxes.len()),
            "table with {} boxes",
            spec.boxes.len()
        );
        let (spec, _) = generate_shape(seed, Archetype::RandomUnion, 16).unwrap();
        assert!((2..=3).contains(&spec.boxes.len()));
    }
}

#[test]
fn shapes_rasterize_to_box_union_inside_margin() {
    let n = 16;
    let margin = n / 5;
    for seed in 0..20 {
        for a in Archetype::ALL {
            let (spec, grid) = generate_shape(seed, a, n).unwrap();
            assert_eq!(grid, union_oracle(n, &spec.boxes), "{a} seed {seed}");
            assert!(grid.occupied() > 0);
            for b in &spec.boxes {
                assert!(b.volume() > 0);
                for ax in 0..3 {
                    assert!(
                        b.origin[ax] >= margin && b.origin[ax] + b.extent[ax] <= n - margin,
                        "{a} {b:?}"
                    );
                }
            }
            assert_eq!(generate_shape(seed, a, n).unwrap().1, grid);
        }
    }
}

#[test]
fn tiny_grids_are_rejected() {
    assert!(generate_shape(0, Archetype::Slab, 7).is_err());
}

#[test]
fn full_cube_fills_every_view() {
    let g = OccupancyGrid::from_fn(8, |_, _, _| 1.0);
    for (az, el) in [(0.0, 0.0), (45.0, 0.0), (90.0, 20.0), (200.0, 35.0)] {
        let v = render_view(&g, az, el, 16, 16, RenderMode::Silhouette).unwrap();
        assert!(v.pixels.iter().all(|&p| p == 1.0), "az {az} el {el}");
        let d = render_view(&g, az, el, 16, 16, RenderMode::Depth).unwrap();
        assert!(d.pixels.iter().all(|&p| p > 0.0 && p <= 1.0));
    }
}

#[test]
fn empty_grid_renders_black() {
    let g = OccupancyGrid::zeros(8);
    for mode in [RenderMode::Silhouette, RenderMode::Depth] {
        let v = render_view(&g, 30.0, 20.0, 8, 8, mode).unwrap();
        assert!(v.pixels.iter().all(|&p| p == 0.0));
    }
}

fn random_grid(seed: u64, n: usize) -> OccupancyGrid {
    let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    OccupancyGrid::from_fn(n, |_, _, _| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s % 5 == 0) as u8 as f32
    })
}

/// Axis-aligned views by direct column scans. Returns the first-hit distance
/// for pixel `(i, j)` of an `n × n` image.
fn axis_view_oracle(g: &OccupancyGrid, az: u32, el: u32, i: usize, j: usize) -> Option<f64> {
    let n = g.side();
    let diag = n as f64 * 3f64.sqrt();
    let start = diag / 2.0 - n as f64 / 2.0;
    let row = n - 1 - i;
    // (cells front to back, as (z, y, x))
    let cells: Vec<[usize; 3]> = match (az, el) {
        (0, 0) => (0..n).rev().map(|z| [z, row, j]).collect(),
        (90, 0) => (0..n).rev().map(|x| [n - 1 - j, row, x]).collect(),
        (180, 0) => (0..n).map(|z| [z, row, n - 1 - j]).collect(),
        (270, 0) => (0..n).map(|x| [j, row, x]).collect(),
        (0, 90) => (0..n).rev().map(|y| [i, y, j]).collect(),
        _ => unreachable!(),
    };
    cells
        .iter()
        .position(|&[z, y, x]| g.get(z, y, x) == 1.0)
        .map(|depth| start + depth as f64)
}

#[test]
fn axis_views_match_column_scans() {
    let n = 8;
    for seed in 0..6 {
        let g = random_grid(seed, n);
        for (az, el) in [(0, 0), (90, 0), (180, 0), (270, 0), (0, 90)] {
            let sil = render_view(&g, az as f64, el as f64, n, n, RenderMode::Silhouette).unwrap();
            let dep = render_view(&g, az as f64, el as f64, n, n, RenderMode::Depth).unwrap();
            let diag = n as f64 * 3f64.sqrt();
            for i in 0..n {
                for j in 0..n {
                    let px = i * n + j;
                    match axis_view_oracle(&g, az, el, i, j) {
                        None => {
                            assert_eq!(sil.pixels[px], 0.0);
                            assert_eq!(dep.pixels[px], 0.0);
                        }
                        Some(t) => {
                            assert_eq!(sil.pixels[px], 1.0, "az {az} el {el} ({i},{j})");
                            let want = (1.0 - t / diag) as f32;
                            assert!(
                                (dep.pixels[px] - want).abs() < 1e-5,
                                "az {az}: {} vs {want}",
                                dep.pixels[px]
                            );
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn non_binary_grids_are_rejected() {
    let g = OccupancyGrid::from_fn(8, |_, _, _| 0.5);
    assert!(render_view(&g, 0.0, 0.0, 8, 8, RenderMode::Depth).is_err());
}

fn small_dataset(objects: usize, seed: u64) -> DatasetConfig {
    let mut cfg = DatasetConfig::balanced(objects, 3, seed);
    cfg.image_side = 16;
    cfg
}

fn tree_hashes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, Sha256::digest(fs::read(&p).unwrap()).to_vec());
            }
        }
    }
    out
}

#[test]
fn dataset_split_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(&small_dataset(10, 4), dir.path()).unwrap();
    let train = manifest
        .objects
        .iter()
        .filter(|o| o.split == Split::Train)
        .count();
    assert_eq!((train, manifest.objects.len() - train), (8, 2));
    let o = &manifest.objects[3];
    assert_eq!(o.id, "obj-0003");
    assert_eq!(o.voxel_path, "voxels/obj-0003.voxg");
    assert_eq!(o.views[2].path, "views/obj-0003/view-02.pgm");
    assert_eq!(
        o.views.iter().map(|v| v.azimuth_deg).collect::<Vec<_>>(),
        vec![0.0, 120.0, 240.0]
    );

    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    let mut keys: Vec<&str> = json
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    keys.sort();
    assert_eq!(keys, ["grid_side", "objects", "version"]);
    let mut obj_keys: Vec<&str> = json["objects"][0]
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    obj_keys.sort();
    assert_eq!(
        obj_keys,
        ["archetype", "id", "split", "views", "voxel_path"]
    );

    let loaded = Dataset::load(dir.path()).unwrap();
    assert_eq!(loaded.manifest, manifest);
    assert_eq!(loaded.split(Split::Train).len(), 8);
    assert_eq!(
        Dataset::load(&dir.path().join("manifest.json"))
            .unwrap()
            .objects,
        loaded.objects
    );
}

#[test]
fn dataset_rebuild_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_dataset(&small_dataset(7, 11), a.path()).unwrap();
    build_dataset(&small_dataset(7, 11), b.path()).unwrap();
    let ha = tree_hashes(a.path());
    assert_eq!(ha.len(), 1 + 7 + 7 * 3);
    assert_eq!(ha, tree_hashes(b.path()));

    let c = tempfile::tempdir().unwrap();
    build_dataset(&small_dataset(7, 12), c.path()).unwrap();
    assert_ne!(ha, tree_hashes(c.path()));
}

#[test]
fn stored_views_match_fresh_renders() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_dataset(5, 2);
    build_dataset(&cfg, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    for o in &ds.objects {
        let v = &o.entry.views[0];
        let fresh = render_view(&o.grid, v.azimuth_deg, v.elevation_deg, 16, 16, cfg.mode).unwrap();
        assert_eq!(fresh.to_image(), o.views[0]);
    }
}

#[test]
fn corrupt_dataset_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&small_dataset(2, 0), dir.path()).unwrap();
    fs::write(
        dir.path().join("views/obj-0001/view-00.pgm"),
        b"P5\n16 16\n255\n",
    )
    .unwrap();
    assert!(Dataset::load(dir.path()).is_err());
    fs::write(dir.path().join("manifest.json"), b"{}").unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}

#[test]
fn generated_box_unions_are_exactly_representable() {
    for (a, seed) in [
        (Archetype::Slab, 1),
        (Archetype::LShape, 2),
        (Archetype::LShape, 3),
    ] {
        let (spec, grid) = generate_shape(seed, a, 16).unwrap();
        let fit = cp_fit_oracle(&grid, spec.boxes.len(), DEFAULT_ITERATIONS, seed).unwrap();
        assert_eq!(fit.iou, 1.0, "{a} seed {seed}");
    }
}

proptest! {
    #[test]
    fn pgm_round_trips(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..w * h).map(|i| (seed.rotate_left(i as u32 % 64) >> 3) as u8).collect();
        let img = GrayImage::new(w, h, pixels).unwrap();
        let back = GrayImage::from_pgm(&img.to_pgm(), Path::new("mem")).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn silhouette_covers_depth_hits(seed in 0u64..500, az in 0.0f64..360.0, el in -60.0f64..60.0) {
        let g = random_grid(seed, 8);
        let s = render_view(&g, az, el, 12, 12, RenderMode::Silhouette).unwrap();
        let d = render_view(&g, az, el, 12, 12, RenderMode::Depth).unwrap();
        for (a, b) in s.pixels.iter().zip(&d.pixels) {
            prop_assert_eq!(*a == 1.0, *b > 0.0);
        }
    }
}

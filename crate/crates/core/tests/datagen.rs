use std::collections::HashSet;

use advxfer_core::datagen::{
    catalog, check_source_ratio, generate_source_dataset, generate_target_dataset, read_dataset, render_container,
    render_fill_fraction, silhouette_mask, write_dataset, write_datasets, Content, ContainerSpec, DataError, Dataset,
    Family, FillClass, Role, ShapeProfile, SplitConfig, Transparency, IMAGE_SIZE,
};
use advxfer_core::Error;
use proptest::prelude::*;

fn spec(family: Family) -> ContainerSpec {
    catalog().into_iter().find(|c| c.family == family).unwrap()
}

fn see_through() -> Vec<ContainerSpec> {
    catalog().into_iter().filter(|c| c.transparency != Transparency::Opaque).collect()
}

/// Pixel indices (row-major) where two HWC images differ in any channel.
fn differing(a: &[f32], b: &[f32]) -> Vec<usize> {
    a.chunks(3).zip(b.chunks(3)).enumerate().filter(|(_, (x, y))| x != y).map(|(i, _)| i).collect()
}

/// Filled pixels and the full interior, found by diffing renders at fill 0,
/// `fraction` and 1 that share every other argument.
fn measured_fill(c: &ContainerSpec, fraction: f64, background: u32, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let render = |f| render_fill_fraction(c, f, Content::Water, false, background, seed).unwrap();
    let empty = render(0.0);
    let filled = differing(render(fraction).values(), empty.values());
    let interior = differing(render(1.0).values(), empty.values());
    (filled, interior)
}

#[test]
fn render_is_deterministic() {
    let c = spec(Family::WineGlass);
    let a = render_container(&c, FillClass::Half, Content::Rice, true, 3, 42).unwrap();
    let b = render_container(&c, FillClass::Half, Content::Rice, true, 3, 42).unwrap();
    assert!(a.image.bit_eq(&b.image));
    assert_eq!(a, b);
}

#[test]
fn half_fill_of_a_cylinder() {
    let c = spec(Family::Tumbler);
    let (filled, interior) = measured_fill(&c, 0.5, 0, 7);
    let ratio = filled.len() as f64 / interior.len() as f64;
    assert!((ratio - 0.5).abs() <= 0.02, "ratio {ratio}");
    // Liquid occupies the bottom: no empty interior pixel lies below a filled one.
    let filled_set: HashSet<usize> = filled.iter().copied().collect();
    let lowest_empty = interior.iter().filter(|i| !filled_set.contains(i)).map(|i| i / IMAGE_SIZE).max().unwrap();
    let highest_filled = filled.iter().map(|i| i / IMAGE_SIZE).min().unwrap();
    assert!(highest_filled >= lowest_empty, "{highest_filled} < {lowest_empty}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn fill_level_matches_label(which in 0usize..7, level in 0usize..3, background in 0u32..6, seed in any::<u64>()) {
        let c = &see_through()[which];
        let fill = FillClass::from_index(level).unwrap();
        let nominal = fill.fraction().unwrap();
        let (filled, interior) = measured_fill(c, nominal, background, seed);
        let ratio = filled.len() as f64 / interior.len() as f64;
        prop_assert!((ratio - nominal).abs() <= 0.05, "{} at {}: {}", c.id, nominal, ratio);
    }

    #[test]
    fn pixels_in_unit_range(family in 0usize..9, occluded in any::<bool>(), seed in any::<u64>()) {
        let c = &catalog()[family];
        let fill = if c.transparency == Transparency::Opaque { FillClass::Unknown } else { FillClass::Ninety };
        let s = render_container(c, fill, Content::Pasta, occluded, (seed % 6) as u32, seed).unwrap();
        prop_assert!(s.image.values().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(s.image.dims(), &[64, 64, 3]);
    }

    #[test]
    fn occlusion_band_coverage(family in 0usize..9, seed in any::<u64>()) {
        let c = &catalog()[family];
        let fill = if c.transparency == Transparency::Opaque { FillClass::Unknown } else { FillClass::Half };
        let plain = render_container(c, fill, Content::Water, false, 1, seed).unwrap();
        let hidden = render_container(c, fill, Content::Water, true, 1, seed).unwrap();
        let changed: HashSet<usize> = differing(plain.image.values(), hidden.image.values()).into_iter().collect();
        let mask = silhouette_mask(c, seed).unwrap();
        let total = mask.iter().filter(|&&m| m).count();
        let covered = mask.iter().enumerate().filter(|(i, &m)| m && changed.contains(i)).count();
        let frac = covered as f64 / total as f64;
        prop_assert!((0.2..=0.4).contains(&frac), "{}: {}", c.id, frac);
    }
}

#[test]
fn opaque_means_unknown() {
    let c = spec(Family::RedCup);
    for fill in FillClass::ALL {
        let s = render_container(&c, fill, Content::Water, false, 0, 1).unwrap();
        assert_eq!(s.label, FillClass::Unknown.index());
    }
    let (train, test) = generate_target_dataset(&catalog(), &SplitConfig::builtin("s3", 5).unwrap(), 0).unwrap();
    for s in train.samples.iter().chain(&test.samples) {
        let opaque = s.meta.transparency == Some(Transparency::Opaque);
        assert_eq!(s.label == FillClass::Unknown.index(), opaque);
    }
}

#[test]
fn see_through_needs_a_level() {
    let c = spec(Family::Flute);
    assert!(matches!(
        render_container(&c, FillClass::Unknown, Content::Water, false, 0, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn degenerate_profile_rejected() {
    let mut c = spec(Family::Tumbler);
    c.profile = ShapeProfile::new(30.0, 0.0, 1.0, vec![(0.0, 0.5), (1.0, 0.5)]);
    assert!(matches!(
        render_fill_fraction(&c, 0.5, Content::Water, false, 0, 0),
        Err(Error::Data(DataError::Generation(_)))
    ));
}

#[test]
fn held_out_families_only_in_test() {
    for id in ["s1", "s2", "s3"] {
        let split = SplitConfig::builtin(id, 4).unwrap();
        let (train, test) = generate_target_dataset(&catalog(), &split, 1).unwrap();
        let names: Vec<&str> = split.held_out.iter().map(|f| f.name()).collect();
        assert!(train.samples.iter().all(|s| !names.contains(&s.meta.shape_family.as_str())));
        assert!(test.samples.iter().all(|s| names.contains(&s.meta.shape_family.as_str())));
        let a: HashSet<String> = train.container_ids().into_iter().collect();
        let b: HashSet<String> = test.container_ids().into_iter().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(train.len(), 6 * 4);
        assert_eq!(test.len(), 3 * 4);
    }
}

#[test]
fn train_size_is_per_container_times_containers() {
    let split = SplitConfig::builtin("s1", 400).unwrap().with_test_samples(1);
    let (train, _) = generate_target_dataset(&catalog(), &split, 0).unwrap();
    assert_eq!(train.len(), 2400);
    let counts = train.class_counts();
    assert!(counts.iter().all(|&c| c > 0));
    assert!(counts.windows(2).any(|w| w[0] != w[1]), "classes should be imbalanced: {counts:?}");
}

#[test]
fn builtin_splits_differ_only_in_held_out() {
    let splits: Vec<SplitConfig> = ["s1", "s2", "s3"].iter().map(|s| SplitConfig::builtin(s, 10).unwrap()).collect();
    for s in &splits {
        assert_eq!(s.held_out.len(), 3);
        assert_eq!(s.samples_per_container, 10);
    }
    assert_ne!(splits[0].held_out, splits[1].held_out);
    assert_ne!(splits[1].held_out, splits[2].held_out);
    assert!(splits[0].held_out.contains(&Family::Flute));
}

#[test]
fn missing_family_is_config_error() {
    let cat: Vec<ContainerSpec> = catalog().into_iter().filter(|c| c.family != Family::Flute).collect();
    let split = SplitConfig::builtin("s1", 2).unwrap();
    assert!(matches!(generate_target_dataset(&cat, &split, 0), Err(Error::Config(_))));
    let lopsided = SplitConfig {
        held_out: vec![Family::Flute],
        ..split
    };
    assert!(matches!(generate_target_dataset(&catalog(), &lopsided, 0), Err(Error::Config(_))));
}

#[test]
fn generation_is_pure() {
    let split = SplitConfig::builtin("s2", 3).unwrap();
    let a = generate_target_dataset(&catalog(), &split, 9).unwrap();
    let b = generate_target_dataset(&catalog(), &split, 9).unwrap();
    assert_eq!(a, b);
    let c = generate_target_dataset(&catalog(), &split, 10).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn source_labels_round_robin() {
    let ds = generate_source_dataset(10, 1003, 0).unwrap();
    let counts = ds.class_counts();
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 1, "{counts:?}");
    assert_eq!(ds.num_classes(), 10);
}

#[test]
fn source_ratio_enforced() {
    let target = generate_target_dataset(&catalog(), &SplitConfig::builtin("s1", 2).unwrap(), 0).unwrap().0;
    let ok = generate_source_dataset(10, 10 * target.len(), 0).unwrap();
    let short = generate_source_dataset(10, 10 * target.len() - 1, 0).unwrap();
    assert!(check_source_ratio(&ok, &target).is_ok());
    assert!(matches!(check_source_ratio(&short, &target), Err(Error::Config(_))));
}

fn image_hash(ds: &Dataset) -> Vec<u64> {
    use std::hash::{Hash, Hasher};
    ds.samples
        .iter()
        .map(|s| {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            for v in s.image.values() {
                v.to_bits().hash(&mut h);
            }
            h.finish()
        })
        .collect()
}

#[test]
fn disjoint_seeds_give_distinct_images() {
    let a = image_hash(&generate_source_dataset(10, 300, 1).unwrap());
    let b = image_hash(&generate_source_dataset(10, 300, 2).unwrap());
    let all: HashSet<u64> = a.iter().chain(&b).copied().collect();
    assert_eq!(all.len(), 600);
}

#[test]
fn write_read_roundtrip_quantized() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("s1");
    let (train, test) = generate_target_dataset(&catalog(), &SplitConfig::builtin("s1", 3).unwrap(), 4).unwrap();
    let source = generate_source_dataset(10, 25, 4).unwrap();
    write_datasets(&root, &[&train, &test, &source]).unwrap();

    let manifest = std::fs::read_to_string(root.join("manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(
        lines.next(),
        Some("filename,fill_class,container_id,shape_family,transparency,occluded,background_id")
    );
    assert_eq!(lines.count(), train.len() + test.len() + source.len());

    for (orig, role) in [(&train, Role::TargetTrain), (&test, Role::TargetTest), (&source, Role::Source)] {
        let back = read_dataset(&root, role).unwrap();
        assert_eq!(back.samples, orig.quantized().samples, "{role:?}");
        assert_eq!(back.class_names, orig.class_names);
        assert_eq!(back.labels(), orig.labels());
    }
}

#[test]
fn deleted_image_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = generate_target_dataset(&catalog(), &SplitConfig::builtin("s2", 2).unwrap(), 0).unwrap();
    write_dataset(&train, dir.path()).unwrap();
    let victim = "target-train/coupe/000001.ppm";
    std::fs::remove_file(dir.path().join(victim)).unwrap();
    match read_dataset(dir.path(), Role::TargetTrain) {
        Err(Error::Data(DataError::Integrity { missing, .. })) => assert_eq!(missing, vec![victim.to_string()]),
        other => panic!("expected integrity error, got {other:?}"),
    }
}

#[test]
fn missing_directory_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        read_dataset(&dir.path().join("nope"), Role::TargetTrain),
        Err(Error::Data(DataError::Read { .. }))
    ));
}

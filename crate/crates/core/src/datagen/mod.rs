//! Procedural datasets: container images labelled by fill level (the target
//! domain) and generic geometric shapes (the source domain).

mod io;
mod render;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use io::{quantize, read_dataset, write_dataset, write_datasets, MANIFEST_HEADER};
pub use render::{
    render_container, render_fill_fraction, render_shape, silhouette_mask, ShapeProfile, NUM_BACKGROUNDS,
};

pub const IMAGE_SIZE: usize = 64;
pub const CHANNELS: usize = 3;
pub const SOURCE_CLASSES: [&str; 10] = [
    "circle", "square", "triangle", "diamond", "pentagon", "hexagon", "cross", "ring", "star", "crescent",
];
/// Minimum source-to-target-train size ratio for transfer runs.
pub const MIN_SOURCE_RATIO: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("generation error: {0}")]
    Generation(String),
    #[error("dataset integrity error: missing {missing:?}, unlisted {unlisted:?}")]
    Integrity { missing: Vec<String>, unlisted: Vec<String> },
    #[error("malformed {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Target label: fill level as a fraction of capacity, or unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FillClass {
    Empty,
    Half,
    Ninety,
    Unknown,
}

impl FillClass {
    pub const ALL: [FillClass; 4] = [FillClass::Empty, FillClass::Half, FillClass::Ninety, FillClass::Unknown];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Nominal filled fraction of the interior; `None` for unknown.
    pub fn fraction(self) -> Option<f64> {
        match self {
            FillClass::Empty => Some(0.0),
            FillClass::Half => Some(0.5),
            FillClass::Ninety => Some(0.9),
            FillClass::Unknown => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FillClass::Empty => "0%",
            FillClass::Half => "50%",
            FillClass::Ninety => "90%",
            FillClass::Unknown => "unknown",
        }
    }
}

impl fmt::Display for FillClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transparency {
    Transparent,
    Translucent,
    Opaque,
}

impl Transparency {
    pub fn name(self) -> &'static str {
        match self {
            Transparency::Transparent => "transparent",
            Transparency::Translucent => "translucent",
            Transparency::Opaque => "opaque",
        }
    }
}

impl FromStr for Transparency {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "transparent" => Ok(Transparency::Transparent),
            "translucent" => Ok(Transparency::Translucent),
            "opaque" => Ok(Transparency::Opaque),
            other => Err(format!("unknown transparency '{other}'")),
        }
    }
}

/// Container shape families. The built-in catalog has one container per family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Flute,
    WineGlass,
    CocktailGlass,
    Coupe,
    BeerCup,
    Tumbler,
    GreenGlass,
    RedCup,
    Mug,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Flute,
        Family::WineGlass,
        Family::CocktailGlass,
        Family::Coupe,
        Family::BeerCup,
        Family::Tumbler,
        Family::GreenGlass,
        Family::RedCup,
        Family::Mug,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Flute => "flute",
            Family::WineGlass => "wine-glass",
            Family::CocktailGlass => "cocktail-glass",
            Family::Coupe => "coupe",
            Family::BeerCup => "beer-cup",
            Family::Tumbler => "tumbler",
            Family::GreenGlass => "green-glass",
            Family::RedCup => "red-cup",
            Family::Mug => "mug",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape family '{s}'")))
    }
}

/// What a container holds; only affects appearance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Content {
    Water,
    Rice,
    Pasta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerSpec {
    pub id: String,
    pub family: Family,
    pub transparency: Transparency,
    pub profile: ShapeProfile,
    /// Body color for opaque containers, tint for translucent ones.
    pub color: [f32; 3],
    pub handle: bool,
}

/// The nine built-in containers.
pub fn catalog() -> Vec<ContainerSpec> {
    use Family::*;
    use Transparency::*;
    let stemmed = |foot: f64, stem_top: f64, bowl: &[(f64, f64)], height: f64| {
        let mut knots = vec![(0.0, foot), (0.04, foot), (0.05, 1.2), (stem_top, 1.2)];
        knots.extend_from_slice(bowl);
        ShapeProfile::new(height, stem_top, 1.0, knots)
    };
    let cup = |bottom: f64, top: f64, height: f64| {
        ShapeProfile::new(height, 0.0, 1.0, vec![(0.0, bottom), (1.0, top)])
    };
    let spec = |family: Family, transparency, profile: ShapeProfile, color, handle| ContainerSpec {
        id: family.name().to_string(),
        family,
        transparency,
        profile,
        color,
        handle,
    };
    let clear = [0.88, 0.93, 0.97];
    vec![
        spec(Flute, Transparent, stemmed(7.0, 0.32, &[(0.34, 3.5), (0.55, 5.5), (1.0, 7.5)], 50.0), clear, false),
        spec(WineGlass, Transparent, stemmed(9.0, 0.3, &[(0.33, 5.0), (0.6, 12.5), (1.0, 10.0)], 46.0), clear, false),
        spec(CocktailGlass, Transparent, stemmed(9.0, 0.42, &[(0.44, 2.0), (1.0, 17.0)], 44.0), clear, false),
        spec(Coupe, Transparent, stemmed(9.0, 0.5, &[(0.53, 6.0), (0.75, 14.5), (1.0, 16.0)], 40.0), clear, false),
        spec(BeerCup, Transparent, cup(8.5, 12.5, 44.0), clear, false),
        spec(Tumbler, Transparent, cup(11.0, 11.5, 30.0), clear, false),
        spec(GreenGlass, Translucent, cup(9.5, 11.0, 36.0), [0.2, 0.55, 0.3], false),
        spec(RedCup, Opaque, cup(8.0, 13.0, 42.0), [0.78, 0.12, 0.1], false),
        spec(Mug, Opaque, cup(11.0, 11.0, 32.0), [0.92, 0.9, 0.84], true),
    ]
}

/// Train/test partition by held-out shape families.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub id: String,
    pub held_out: Vec<Family>,
    pub samples_per_container: usize,
    pub test_samples_per_container: usize,
}

impl SplitConfig {
    /// Built-in splits: `s1` holds out flute, beer cup and cocktail glass;
    /// `s2` flute, wine glass and cocktail glass; `s3` red cup, green glass
    /// and beer cup.
    pub fn builtin(id: &str, samples_per_container: usize) -> Result<Self> {
        use Family::*;
        let held_out = match id {
            "s1" => vec![Flute, BeerCup, CocktailGlass],
            "s2" => vec![Flute, WineGlass, CocktailGlass],
            "s3" => vec![RedCup, GreenGlass, BeerCup],
            other => return Err(Error::config(format!("unknown split '{other}' (expected s1, s2 or s3)"))),
        };
        Ok(Self {
            id: id.to_string(),
            held_out,
            samples_per_container,
            test_samples_per_container: samples_per_container,
        })
    }

    pub fn with_test_samples(mut self, n: usize) -> Self {
        self.test_samples_per_container = n;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Source,
    TargetTrain,
    TargetTest,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::TargetTrain => "target-train",
            Role::TargetTest => "target-test",
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            Role::Source => SOURCE_CLASSES.iter().map(|s| s.to_string()).collect(),
            _ => FillClass::ALL.iter().map(|c| c.name().to_string()).collect(),
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Role::Source, Role::TargetTrain, Role::TargetTest]
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::config(format!("unknown dataset role '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub container_id: String,
    pub shape_family: String,
    /// `None` for source-domain shapes.
    pub transparency: Option<Transparency>,
    pub occluded: bool,
    pub background_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// `H x W x C`, values in [0, 1].
    pub image: Tensor<f32>,
    pub label: usize,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub role: Role,
    pub split_id: String,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Container ids in first-appearance order.
    pub fn container_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for s in &self.samples {
            if !ids.contains(&s.meta.container_id) {
                ids.push(s.meta.container_id.clone());
            }
        }
        ids
    }

    /// Stacks the selected samples into an `N x C x H x W` batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let hw = IMAGE_SIZE * IMAGE_SIZE;
        let mut values = Vec::with_capacity(indices.len() * hw * CHANNELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            let px = s.image.values();
            for c in 0..CHANNELS {
                values.extend((0..hw).map(|p| T::from_f64(px[p * CHANNELS + c] as f64)));
            }
            labels.push(s.label);
        }
        let t = Tensor::new(vec![indices.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE], values).expect("batch dims");
        (t, labels)
    }

    /// Each pixel rounded to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.samples {
            for v in s.image.values_mut() {
                *v = quantize(*v) as f32 / 255.0;
            }
        }
        out
    }
}

/// Mixes two seeds into one (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fill class for the `index`-th sample of a see-through container: an
/// interleaved 8:5:5 cycle over empty, half and ninety (40/25/25 of all
/// target samples, the rest being unknown from opaque containers).
pub fn fill_schedule(index: usize) -> FillClass {
    const CYCLE: [FillClass; 18] = {
        use FillClass::*;
        [
            Empty, Half, Ninety, Empty, Half, Empty, Ninety, Empty, Half, Ninety, Empty, Half, Empty, Ninety,
            Empty, Half, Ninety, Empty,
        ]
    };
    CYCLE[index % CYCLE.len()]
}

fn container_samples(
    spec: &ContainerSpec,
    count: usize,
    role: Role,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    let role_salt = match role {
        Role::TargetTrain => 1,
        _ => 2,
    };
    let base = mix_seed(mix_seed(seed, role_salt), spec.id.bytes().fold(0u64, |h, b| mix_seed(h, b as u64)));
    (0..count)
        .map(|i| {
            let sample_seed = mix_seed(base, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let background = rng.random_range(0..NUM_BACKGROUNDS);
            let occluded = rng.random_bool(0.25);
            let content = match rng.random_range(0..3) {
                0 => Content::Water,
                1 => Content::Rice,
                _ => Content::Pasta,
            };
            let fill = if spec.transparency == Transparency::Opaque {
                FillClass::Unknown
            } else {
                fill_schedule(i)
            };
            render_container(spec, fill, content, occluded, background, sample_seed)
        })
        .collect()
}

/// Renders the train split (all non-held-out containers) and the test split
/// (held-out containers only).
pub fn generate_target_dataset(
    catalog: &[ContainerSpec],
    split: &SplitConfig,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    for f in &split.held_out {
        if !catalog.iter().any(|c| c.family == *f) {
            return Err(Error::config(format!("held-out family '{f}' is not in the catalog")));
        }
    }
    let (test_specs, train_specs): (Vec<_>, Vec<_>) =
        catalog.iter().partition(|c| split.held_out.contains(&c.family));
    let families = |specs: &[&ContainerSpec]| {
        let mut f: Vec<Family> = specs.iter().map(|c| c.family).collect();
        f.sort();
        f.dedup();
        f.len()
    };
    if families(&train_specs) < 2 || families(&test_specs) < 2 {
        return Err(Error::config(format!(
            "split '{}' needs at least two families on each side",
            split.id
        )));
    }
    if split.samples_per_container == 0 || split.test_samples_per_container == 0 {
        return Err(Error::config("samples per container must be positive"));
    }
    let build = |specs: &[&ContainerSpec], count: usize, role: Role| -> Result<Dataset> {
        let mut samples = Vec::new();
        for spec in specs {
            samples.extend(container_samples(spec, count, role, seed)?);
        }
        Ok(Dataset {
            samples,
            role,
            split_id: split.id.clone(),
            class_names: role.class_names(),
        })
    };
    let train = build(&train_specs, split.samples_per_container, Role::TargetTrain)?;
    let test = build(&test_specs, split.test_samples_per_container, Role::TargetTest)?;
    Ok((train, test))
}

/// Generic shape-classification images; labels are assigned round-robin.
pub fn generate_source_dataset(num_classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if !(2..=SOURCE_CLASSES.len()).contains(&num_classes) {
        return Err(Error::config(format!(
            "source classes must be in 2..={}, got {num_classes}",
            SOURCE_CLASSES.len()
        )));
    }
    let base = mix_seed(seed, 0x5012_ce);
    let samples = (0..size)
        .map(|i| render_shape(i % num_classes, mix_seed(base, i as u64)))
        .collect();
    Ok(Dataset {
        samples,
        role: Role::Source,
        split_id: "source".into(),
        class_names: SOURCE_CLASSES[..num_classes].iter().map(|s| s.to_string()).collect(),
    })
}

/// Checks that the source set is at least ten times the target train set.
pub fn check_source_ratio(source: &Dataset, target_train: &Dataset) -> Result<()> {
    if source.len() < MIN_SOURCE_RATIO * target_train.len() {
        return Err(Error::config(format!(
            "source set ({}) must be at least {MIN_SOURCE_RATIO}x the target train set ({})",
            source.len(),
            target_train.len()
        )));
    }
    Ok(())
}

//! Rasterization of containers and source shapes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    mix_seed, Content, ContainerSpec, DataError, FillClass, ImageSample, SampleMeta, Transparency, CHANNELS,
    IMAGE_SIZE, SOURCE_CLASSES,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_BACKGROUNDS: u32 = 6;

const NOISE_STD: f64 = 0.02;
const NOISE_CLIP: f64 = 0.05;
const GROUND_ROW: f64 = 58.0;

/// Vessel outline as a radius function of height.
///
/// `knots` are `(t, radius)` pairs with `t` in [0, 1] measured from the
/// base up; the radius is linearly interpolated in between. The interior
/// (the part that can hold content) starts at `interior_from` plus one
/// wall thickness and stays `wall` pixels inside the outline.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeProfile {
    pub height: f64,
    pub interior_from: f64,
    pub wall: f64,
    pub knots: Vec<(f64, f64)>,
}

impl ShapeProfile {
    pub fn new(height: f64, interior_from: f64, wall: f64, knots: Vec<(f64, f64)>) -> Self {
        Self {
            height,
            interior_from,
            wall,
            knots,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok_knots = !self.knots.is_empty()
            && self.knots.windows(2).all(|w| w[0].0 <= w[1].0)
            && self.knots.iter().all(|&(t, r)| (0.0..=1.0).contains(&t) && r >= 0.0 && r.is_finite());
        if !ok_knots || !(self.height > 0.0) || !(self.wall >= 0.0) {
            return Err(DataError::Generation(format!("invalid shape profile {self:?}")).into());
        }
        Ok(())
    }

    pub fn radius(&self, t: f64) -> f64 {
        let k = &self.knots;
        if t <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            let ((t0, r0), (t1, r1)) = (w[0], w[1]);
            if t <= t1 {
                return if t1 > t0 { r0 + (r1 - r0) * (t - t0) / (t1 - t0) } else { r1 };
            }
        }
        k[k.len() - 1].1
    }
}

type Rgb = [f64; 3];

struct Canvas {
    px: Vec<Rgb>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            px: vec![[0.0; 3]; IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    fn at(&mut self, y: usize, x: usize) -> &mut Rgb {
        &mut self.px[y * IMAGE_SIZE + x]
    }

    fn finish(self, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 19));
        let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
        let mut values = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * CHANNELS);
        for p in &self.px {
            for &c in p {
                let n: f64 = noise.sample(&mut rng);
                values.push((c + n.clamp(-NOISE_CLIP, NOISE_CLIP)).clamp(0.0, 1.0) as f32);
            }
        }
        Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE, CHANNELS], values).expect("image dims")
    }
}

fn mix(a: Rgb, b: Rgb, alpha: f64) -> Rgb {
    [0, 1, 2].map(|c| a[c] * (1.0 - alpha) + b[c] * alpha)
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Rgb {
    [0, 1, 2].map(|_| rng.random_range(lo..hi))
}

fn paint_background(canvas: &mut Canvas, background_id: u32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 23));
    let c1 = random_color(&mut rng, 0.15, 0.85);
    let c2 = random_color(&mut rng, 0.15, 0.85);
    let period = rng.random_range(6..12);
    let split = rng.random_range(38..50);
    let last = (IMAGE_SIZE - 1) as f64;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            *canvas.at(y, x) = match background_id % NUM_BACKGROUNDS {
                0 => c1,
                1 => mix(c1, c2, y as f64 / last),
                2 => mix(c1, c2, x as f64 / last),
                3 => {
                    if (x / period) % 2 == 0 {
                        c1
                    } else {
                        c2
                    }
                }
                4 => {
                    if (x / 8 + y / 8) % 2 == 0 {
                        c1
                    } else {
                        c2
                    }
                }
                _ => {
                    if y < split {
                        c1
                    } else {
                        mix(c2, [0.0; 3], 0.2)
                    }
                }
            };
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Cell {
    Outside,
    Body,
    Interior,
}

struct Layout {
    cells: Vec<Cell>,
    interior_order: Vec<usize>,
    cx: f64,
    radius_at: Vec<f64>,
}

fn layout(spec: &ContainerSpec, seed: u64) -> Result<Layout> {
    let profile = &spec.profile;
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 11));
    let scale = rng.random_range(0.92..1.05);
    let cx = IMAGE_SIZE as f64 / 2.0 + rng.random_range(-5.0..5.0);
    let base = GROUND_ROW + rng.random_range(-3.0..3.0);
    let height = profile.height * scale;
    let t_interior = profile.interior_from + profile.wall / height;

    let mut cells = vec![Cell::Outside; IMAGE_SIZE * IMAGE_SIZE];
    let mut radius_at = vec![0.0; IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        let t = (base - (y as f64 + 0.5)) / height;
        if !(0.0..=1.0).contains(&t) {
            continue;
        }
        let r = profile.radius(t) * scale;
        radius_at[y] = r;
        for x in 0..IMAGE_SIZE {
            let d = (x as f64 + 0.5 - cx).abs();
            if d <= r {
                let inside = t >= t_interior && d <= r - profile.wall;
                cells[y * IMAGE_SIZE + x] = if inside { Cell::Interior } else { Cell::Body };
            }
        }
    }
    if spec.handle {
        let hy = base - 0.55 * height;
        let hx = cx + profile.radius(0.55) * scale;
        let (r_in, r_out) = (0.16 * height, 0.28 * height);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let d2 = (px - hx).powi(2) + (py - hy).powi(2);
                let cell = &mut cells[y * IMAGE_SIZE + x];
                if px > hx && d2 >= r_in * r_in && d2 <= r_out * r_out && *cell == Cell::Outside {
                    *cell = Cell::Body;
                }
            }
        }
    }

    // Content settles from the bottom row up; a partial row fills from the axis outwards.
    let mut interior_order: Vec<usize> = (0..cells.len()).filter(|&i| cells[i] == Cell::Interior).collect();
    interior_order.sort_by(|&a, &b| {
        let (ya, xa) = (a / IMAGE_SIZE, a % IMAGE_SIZE);
        let (yb, xb) = (b / IMAGE_SIZE, b % IMAGE_SIZE);
        let da = (xa as f64 + 0.5 - cx).abs();
        let db = (xb as f64 + 0.5 - cx).abs();
        yb.cmp(&ya).then(da.total_cmp(&db)).then(xa.cmp(&xb))
    });
    if interior_order.is_empty() {
        return Err(DataError::Generation(format!("container '{}' has no interior", spec.id)).into());
    }
    Ok(Layout {
        cells,
        interior_order,
        cx,
        radius_at,
    })
}

/// Pixels covered by the container (body and interior) for a given seed, row-major.
pub fn silhouette_mask(spec: &ContainerSpec, seed: u64) -> Result<Vec<bool>> {
    Ok(layout(spec, seed)?.cells.iter().map(|&c| c != Cell::Outside).collect())
}

fn content_color(content: Content) -> (Rgb, f64, f64) {
    // (color, opacity, grain amplitude)
    match content {
        Content::Water => ([0.3, 0.55, 0.85], 0.55, 0.0),
        Content::Rice => ([0.93, 0.9, 0.8], 0.85, 0.06),
        Content::Pasta => ([0.95, 0.72, 0.28], 0.85, 0.08),
    }
}

fn paint_occlusion(canvas: &mut Canvas, cells: &[Cell], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 17));
    let coverage = rng.random_range(0.2..0.34);
    let skin = mix([0.87, 0.67, 0.52], random_color(&mut rng, 0.0, 1.0), 0.1);
    let row_count: Vec<usize> = (0..IMAGE_SIZE)
        .map(|y| (0..IMAGE_SIZE).filter(|&x| cells[y * IMAGE_SIZE + x] != Cell::Outside).count())
        .collect();
    let total: usize = row_count.iter().sum();
    let rows: Vec<usize> = (0..IMAGE_SIZE).filter(|&y| row_count[y] > 0).collect();
    let cols: Vec<usize> = (0..IMAGE_SIZE)
        .filter(|&x| (0..IMAGE_SIZE).any(|y| cells[y * IMAGE_SIZE + x] != Cell::Outside))
        .collect();
    let (x0, x1) = (cols[0].saturating_sub(2), (cols[cols.len() - 1] + 2).min(IMAGE_SIZE - 1));
    let target = coverage * total as f64;
    let start = rows[rng.random_range(0..rows.len())];
    let (mut lo, mut hi) = (start, start);
    let mut covered = row_count[start];
    while (covered as f64) < target {
        if hi + 1 < IMAGE_SIZE && row_count[hi + 1] > 0 {
            hi += 1;
            covered += row_count[hi];
        } else {
            lo -= 1;
            covered += row_count[lo];
        }
    }
    for y in lo..=hi {
        for x in x0..=x1 {
            *canvas.at(y, x) = skin;
        }
    }
}

/// Renders a container whose interior is filled to `fraction` of its area.
///
/// Content fills interior pixels bottom-up until the filled pixel count is
/// `round(fraction * interior_area)`. Opaque containers hide their content.
pub fn render_fill_fraction(
    spec: &ContainerSpec,
    fraction: f64,
    content: Content,
    occluded: bool,
    background_id: u32,
    seed: u64,
) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("fill fraction must be in [0, 1], got {fraction}")));
    }
    let lay = layout(spec, seed)?;
    let mut canvas = Canvas::new();
    paint_background(&mut canvas, background_id, seed);

    let n_fill = (fraction * lay.interior_order.len() as f64).round() as usize;
    let mut filled = vec![false; lay.cells.len()];
    for &i in &lay.interior_order[..n_fill] {
        filled[i] = true;
    }
    let (liquid, opacity, grain) = content_color(content);
    let mut grain_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 13));
    let tint: Rgb = spec.color.map(|c| c as f64);

    for (i, &cell) in lay.cells.iter().enumerate() {
        if cell == Cell::Outside {
            continue;
        }
        let (y, x) = (i / IMAGE_SIZE, i % IMAGE_SIZE);
        let bg = *canvas.at(y, x);
        let mut wet = || {
            let g = if grain > 0.0 { grain_rng.random_range(-grain..grain) } else { 0.0 };
            mix(bg, liquid.map(|c| c + g), opacity)
        };
        let px = match (spec.transparency, cell) {
            (Transparency::Opaque, _) => {
                let r = lay.radius_at[y].max(1.0);
                let d = ((x as f64 + 0.5 - lay.cx).abs() / r).min(1.0);
                tint.map(|c| c * (0.75 + 0.25 * (1.0 - d * d)))
            }
            (Transparency::Transparent, Cell::Body) => mix(bg, tint, 0.5),
            (Transparency::Transparent, _) if filled[i] => wet(),
            (Transparency::Transparent, _) => mix(bg, tint, 0.15),
            (Transparency::Translucent, Cell::Body) => mix(bg, tint, 0.7),
            (Transparency::Translucent, _) if filled[i] => mix(wet(), tint, 0.45),
            (Transparency::Translucent, _) => mix(bg, tint, 0.45),
        };
        *canvas.at(y, x) = px;
    }
    if occluded {
        paint_occlusion(&mut canvas, &lay.cells, seed);
    }
    Ok(canvas.finish(seed))
}

/// Renders one labelled container image. Opaque containers are always
/// labelled unknown; see-through containers need a concrete fill level.
pub fn render_container(
    spec: &ContainerSpec,
    fill: FillClass,
    content: Content,
    occluded: bool,
    background_id: u32,
    seed: u64,
) -> Result<ImageSample> {
    let (label, fraction) = match (spec.transparency, fill.fraction()) {
        (Transparency::Opaque, f) => (FillClass::Unknown, f.unwrap_or(0.0)),
        (_, Some(f)) => (fill, f),
        (_, None) => {
            return Err(Error::config(format!(
                "container '{}' is see-through and needs a fill level",
                spec.id
            )))
        }
    };
    let image = render_fill_fraction(spec, fraction, content, occluded, background_id, seed)?;
    Ok(ImageSample {
        image,
        label: label.index(),
        meta: SampleMeta {
            container_id: spec.id.clone(),
            shape_family: spec.family.name().to_string(),
            transparency: Some(spec.transparency),
            occluded,
            background_id,
        },
    })
}

fn regular_polygon(u: f64, v: f64, n: usize, phase: f64) -> bool {
    let r = u.hypot(v);
    let sector = 2.0 * PI / n as f64;
    let a = (v.atan2(u) - phase).rem_euclid(sector);
    r * (a - sector / 2.0).cos() <= (PI / n as f64).cos()
}

fn inside_shape(class: usize, u: f64, v: f64) -> bool {
    let r = u.hypot(v);
    match class {
        0 => r <= 1.0,
        1 => regular_polygon(u, v, 4, PI / 4.0),
        2 => regular_polygon(u, v, 3, -PI / 2.0),
        3 => regular_polygon(u, v, 4, 0.0),
        4 => regular_polygon(u, v, 5, -PI / 2.0),
        5 => regular_polygon(u, v, 6, -PI / 2.0),
        6 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        7 => (0.55..=1.0).contains(&r),
        8 => {
            let sector = 2.0 * PI / 5.0;
            let a = (v.atan2(u) + PI / 2.0).rem_euclid(sector);
            let off = a.min(sector - a) / (sector / 2.0);
            r <= 1.0 - 0.58 * off
        }
        _ => r <= 1.0 && (u - 0.45).hypot(v) > 0.8,
    }
}

/// Renders a source-domain image of geometric shape `class`.
pub fn render_shape(class: usize, seed: u64) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 29));
    let background_id = rng.random_range(0..NUM_BACKGROUNDS);
    let mut canvas = Canvas::new();
    paint_background(&mut canvas, background_id, seed);

    let radius = rng.random_range(12.0..22.0);
    let lo = radius + 2.0;
    let hi = IMAGE_SIZE as f64 - radius - 2.0;
    let (cx, cy) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let angle: f64 = rng.random_range(-0.25..0.25);
    let mut color = random_color(&mut rng, 0.1, 0.9);
    let mean_bg = canvas.px.iter().fold([0.0; 3], |acc, p| [0, 1, 2].map(|c| acc[c] + p[c]));
    let n = canvas.px.len() as f64;
    let dist: f64 = (0..3).map(|c| (color[c] - mean_bg[c] / n).abs()).sum();
    if dist < 0.45 {
        color = color.map(|c| 1.0 - c);
    }
    let stripes = rng.random_bool(0.5).then(|| rng.random_range(3.0..7.0));
    let (sin, cos) = angle.sin_cos();
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / radius, (y as f64 + 0.5 - cy) / radius);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            if inside_shape(class, u, v) {
                let shade = match stripes {
                    Some(p) if ((x as f64 + y as f64) / p) as usize % 2 == 0 => 0.85,
                    _ => 1.0,
                };
                *canvas.at(y, x) = color.map(|c| c * shade);
            }
        }
    }
    let name = SOURCE_CLASSES[class].to_string();
    ImageSample {
        image: canvas.finish(seed),
        label: class,
        meta: SampleMeta {
            container_id: name.clone(),
            shape_family: name,
            transparency: None,
            occluded: false,
            background_id,
        },
    }
}

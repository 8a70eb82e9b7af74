//! Labelled volumes: synthetic phantom generation, slicing into 2D training
//! samples, 3D reassembly of predictions and seeded train/validation splits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::ImageSlice;
use crate::error::{Error, Result};
use crate::tensor::resize_nearest;

/// Dense `depth × height × width` volume, row-major with width fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<V> {
    shape: [usize; 3],
    data: Vec<V>,
}

pub type LabelVolume = Volume<u16>;
pub type IntensityVolume = Volume<f32>;

impl<V: Copy> Volume<V> {
    pub fn new(shape: [usize; 3], data: Vec<V>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "volume {shape:?} needs {} voxels, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: V) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn depth(&self) -> usize {
        self.shape[0]
    }

    pub fn plane(&self) -> (usize, usize) {
        (self.shape[1], self.shape[2])
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn slice(&self, k: usize) -> &[V] {
        let n = self.shape[1] * self.shape[2];
        &self.data[k * n..(k + 1) * n]
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> V {
        self.data[(z * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Reorders axes so that `axis` becomes the slicing (leading) axis; the
    /// remaining two keep their relative order.
    pub fn axis_to_front(&self, axis: usize) -> Result<Self> {
        let [d, h, w] = self.shape;
        match axis {
            0 => Ok(self.clone()),
            1 => {
                let mut out = Vec::with_capacity(self.data.len());
                for y in 0..h {
                    for z in 0..d {
                        for x in 0..w {
                            out.push(self.at(z, y, x));
                        }
                    }
                }
                Volume::new([h, d, w], out)
            }
            2 => {
                let mut out = Vec::with_capacity(self.data.len());
                for x in 0..w {
                    for z in 0..d {
                        for y in 0..h {
                            out.push(self.at(z, y, x));
                        }
                    }
                }
                Volume::new([w, d, h], out)
            }
            _ => Err(Error::InvalidInput(format!("slice axis {axis} out of range"))),
        }
    }

    /// Inverse of [`Volume::axis_to_front`].
    pub fn axis_from_front(&self, axis: usize) -> Result<Self> {
        let [a, b, c] = self.shape;
        match axis {
            0 => Ok(self.clone()),
            1 => {
                let (d, h, w) = (b, a, c);
                let mut out = Vec::with_capacity(self.data.len());
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            out.push(self.at(y, z, x));
                        }
                    }
                }
                Volume::new([d, h, w], out)
            }
            2 => {
                let (d, h, w) = (b, c, a);
                let mut out = Vec::with_capacity(self.data.len());
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            out.push(self.at(x, z, y));
                        }
                    }
                }
                Volume::new([d, h, w], out)
            }
            _ => Err(Error::InvalidInput(format!("slice axis {axis} out of range"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelSlice {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelSlice {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label slice {height}x{width} with {} values",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn binary_mask(&self, class: u16) -> Vec<f32> {
        self.labels.iter().map(|&l| (l == class) as u8 as f32).collect()
    }

    pub fn resized(&self, height: usize, width: usize) -> LabelSlice {
        LabelSlice {
            height,
            width,
            labels: resize_nearest(&self.labels, self.height, self.width, height, width),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub volume_id: String,
    pub class_names: Vec<String>,
    pub intensities: IntensityVolume,
    pub labels: LabelVolume,
}

impl LabeledVolume {
    pub fn new(
        volume_id: impl Into<String>,
        class_names: Vec<String>,
        intensities: IntensityVolume,
        labels: LabelVolume,
    ) -> Result<Self> {
        if intensities.shape() != labels.shape() {
            return Err(Error::shape(format!(
                "intensities {:?} vs labels {:?}",
                intensities.shape(),
                labels.shape()
            )));
        }
        if let Some(&bad) = labels.data().iter().find(|&&l| l as usize > class_names.len()) {
            return Err(Error::Data(format!(
                "label {bad} exceeds the {} declared classes",
                class_names.len()
            )));
        }
        Ok(Self {
            volume_id: volume_id.into(),
            class_names,
            intensities,
            labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Same volume re-sliced along `axis`.
    pub fn oriented(&self, axis: usize) -> Result<Self> {
        Ok(Self {
            volume_id: self.volume_id.clone(),
            class_names: self.class_names.clone(),
            intensities: self.intensities.axis_to_front(axis)?,
            labels: self.labels.axis_to_front(axis)?,
        })
    }
}

/// Splits a volume into its leading-axis slices, in order.
pub fn slice_volume(vol: &LabeledVolume) -> Result<Vec<(ImageSlice, LabelSlice)>> {
    let [d, h, w] = vol.labels.shape();
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("cannot slice an empty volume {:?}", [d, h, w])));
    }
    (0..d)
        .map(|k| {
            let img = ImageSlice::new(h, w, vol.intensities.slice(k).to_vec())?;
            let lab = LabelSlice::new(h, w, vol.labels.slice(k).to_vec())?;
            Ok((img, lab))
        })
        .collect()
}

/// Stacks per-slice label maps back into a volume, nearest-resizing each to
/// `plane` first.
pub fn reassemble_volume(slices: &[LabelSlice], expected_depth: usize, plane: (usize, usize)) -> Result<LabelVolume> {
    if slices.len() != expected_depth {
        return Err(Error::shape(format!(
            "reassembly expected {expected_depth} slices, got {}",
            slices.len()
        )));
    }
    let Some(first) = slices.first() else {
        return Err(Error::shape("reassembly of zero slices"));
    };
    let (sh, sw) = (first.height, first.width);
    let mut data = Vec::with_capacity(expected_depth * plane.0 * plane.1);
    for s in slices {
        if (s.height, s.width) != (sh, sw) {
            return Err(Error::shape(format!(
                "non-uniform slice shapes: {}x{} vs {sh}x{sw}",
                s.height, s.width
            )));
        }
        if (sh, sw) == plane {
            data.extend_from_slice(&s.labels);
        } else {
            data.extend(resize_nearest(&s.labels, sh, sw, plane.0, plane.1));
        }
    }
    Volume::new([expected_depth, plane.0, plane.1], data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub seed: u64,
}

pub const TRAIN_FRACTION: f64 = 0.8;

/// Seeded 80/20 partition. At least one id always lands in validation.
pub fn make_split(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    if ids.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "a split needs at least 2 volumes, got {}",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_train = ((TRAIN_FRACTION * ids.len() as f64).round() as usize).min(ids.len() - 1);
    let val_ids = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train_ids: shuffled,
        val_ids,
        seed,
    })
}

// ----------------------------------------------------------------------
// synthetic phantoms

pub const MAX_SYNTHETIC_CLASSES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipsoid,
    Box,
    Tube,
    Shell,
    Cylinder,
    Torus,
    Plate,
    Bead,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; MAX_SYNTHETIC_CLASSES] = [
        ShapeKind::Ellipsoid,
        ShapeKind::Box,
        ShapeKind::Tube,
        ShapeKind::Shell,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::Plate,
        ShapeKind::Bead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Ellipsoid => "ellipsoid",
            ShapeKind::Box => "box",
            ShapeKind::Tube => "tube",
            ShapeKind::Shell => "shell",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::Plate => "plate",
            ShapeKind::Bead => "bead",
        }
    }

    /// Mean foreground intensity; neighbours in this table differ by ≥ 0.35.
    fn intensity(self) -> f64 {
        match self {
            ShapeKind::Ellipsoid => 1.0,
            ShapeKind::Box => 2.1,
            ShapeKind::Tube => 1.55,
            ShapeKind::Shell => 2.65,
            ShapeKind::Cylinder => 0.6,
            ShapeKind::Torus => 3.1,
            ShapeKind::Plate => 1.3,
            ShapeKind::Bead => 1.85,
        }
    }

    /// Rough in-plane footprint radius (normalised units) used for placement.
    fn footprint(self) -> f64 {
        match self {
            ShapeKind::Ellipsoid => 0.17,
            ShapeKind::Box => 0.17,
            ShapeKind::Tube => 0.1,
            ShapeKind::Shell => 0.15,
            ShapeKind::Cylinder => 0.1,
            ShapeKind::Torus => 0.15,
            ShapeKind::Plate => 0.16,
            ShapeKind::Bead => 0.08,
        }
    }
}

pub fn synthetic_class_names(num_classes: usize) -> Vec<String> {
    ShapeKind::ALL[..num_classes.min(MAX_SYNTHETIC_CLASSES)]
        .iter()
        .map(|k| k.name().to_string())
        .collect()
}

/// Membership test in normalised coordinates `(z, y, x) ∈ [0,1]³`.
struct Placed {
    kind: ShapeKind,
    center: [f64; 3],
    radii: [f64; 3],
    angle: f64,
    drift: [f64; 2],
    extra: f64,
}

impl Placed {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let [cz, cy, cx] = self.center;
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - cy, x - cx);
        let (ry, rx) = (c * dy + s * dx, -s * dy + c * dx);
        let dz = z - cz;
        let [az, ay, ax] = self.radii;
        match self.kind {
            ShapeKind::Ellipsoid | ShapeKind::Bead => {
                (dz / az).powi(2) + (ry / ay).powi(2) + (rx / ax).powi(2) <= 1.0
            }
            ShapeKind::Box => dz.abs() <= az && ry.abs() <= ay && rx.abs() <= ax,
            ShapeKind::Shell => {
                let r = ((dz / az).powi(2) + (ry / ay).powi(2) + (rx / ax).powi(2)).sqrt();
                r <= 1.0 && r >= 1.0 - self.extra
            }
            ShapeKind::Tube => {
                // runs through the whole stack, drifting in-plane with depth
                let py = cy + self.drift[0] * (z - 0.5);
                let px = cx + self.drift[1] * (z - 0.5);
                ((y - py) / ay).powi(2) + ((x - px) / ax).powi(2) <= 1.0
            }
            ShapeKind::Cylinder => dz.abs() <= az && (ry / ay).powi(2) + (rx / ax).powi(2) <= 1.0,
            ShapeKind::Torus => {
                let rho = ((ry / ay).powi(2) + (rx / ax).powi(2)).sqrt();
                dz.abs() <= az && (rho - 1.0).abs() <= self.extra
            }
            ShapeKind::Plate => {
                let rho2 = (ry / ay).powi(2) + (rx / ax).powi(2);
                rho2 <= 1.0 && (dz + self.extra * rx).abs() <= az
            }
        }
    }
}

fn place(kind: ShapeKind, center: [f64; 3], rng: &mut ChaCha8Rng) -> Placed {
    let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..hi);
    let angle = u(rng, 0.0, std::f64::consts::PI);
    let (radii, drift, extra) = match kind {
        ShapeKind::Ellipsoid => ([u(rng, 0.3, 0.45), u(rng, 0.1, 0.15), u(rng, 0.1, 0.15)], [0.0; 2], 0.0),
        ShapeKind::Box => ([u(rng, 0.25, 0.4), u(rng, 0.08, 0.12), u(rng, 0.08, 0.12)], [0.0; 2], 0.0),
        ShapeKind::Tube => {
            let r = u(rng, 0.045, 0.06);
            ([1.0, r, r], [u(rng, -0.12, 0.12), u(rng, -0.12, 0.12)], 0.0)
        }
        ShapeKind::Shell => {
            let r = u(rng, 0.11, 0.14);
            ([u(rng, 0.35, 0.45), r, r], [0.0; 2], u(rng, 0.3, 0.4))
        }
        ShapeKind::Cylinder => {
            let r = u(rng, 0.06, 0.09);
            ([u(rng, 0.2, 0.35), r, r], [0.0; 2], 0.0)
        }
        ShapeKind::Torus => {
            let r = u(rng, 0.09, 0.12);
            ([u(rng, 0.2, 0.3), r, r], [0.0; 2], u(rng, 0.3, 0.4))
        }
        ShapeKind::Plate => ([u(rng, 0.1, 0.15), u(rng, 0.1, 0.15), u(rng, 0.12, 0.15)], [0.0; 2], u(rng, -1.0, 1.0)),
        ShapeKind::Bead => {
            let r = u(rng, 0.05, 0.07);
            ([u(rng, 0.2, 0.3), r, r], [0.0; 2], 0.0)
        }
    };
    Placed {
        kind,
        center,
        radii,
        angle,
        drift,
        extra,
    }
}

/// Deterministic phantom: one structure per class at a non-overlapping
/// in-plane position, class-specific intensity, smooth multiplicative bias
/// field and additive Gaussian noise.
pub fn generate_synthetic_volume(seed: u64, num_classes: usize, shape: [usize; 3]) -> Result<LabeledVolume> {
    if !(1..=MAX_SYNTHETIC_CLASSES).contains(&num_classes) {
        return Err(Error::InvalidInput(format!(
            "synthetic class count must be in 1..={MAX_SYNTHETIC_CLASSES}, got {num_classes}"
        )));
    }
    let [d, h, w] = shape;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!("empty volume shape {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = &ShapeKind::ALL[..num_classes];

    let mut centers: Vec<([f64; 2], f64)> = Vec::new();
    let mut placed = Vec::with_capacity(num_classes);
    for &kind in kinds {
        let fp = kind.footprint();
        let mut best = None;
        for attempt in 0..200 {
            let cy = rng.random_range(fp + 0.03..1.0 - fp - 0.03);
            let cx = rng.random_range(fp + 0.03..1.0 - fp - 0.03);
            let clear = centers
                .iter()
                .all(|(c, r)| ((c[0] - cy).powi(2) + (c[1] - cx).powi(2)).sqrt() > r + fp + 0.02);
            if clear || attempt == 199 {
                best = Some([cy, cx]);
                break;
            }
        }
        let [cy, cx] = best.expect("placement loop always yields");
        centers.push(([cy, cx], fp));
        let cz = rng.random_range(0.4..0.6);
        placed.push(place(kind, [cz, cy, cx], &mut rng));
    }

    let mut labels = vec![0u16; d * h * w];
    for z in 0..d {
        let zn = (z as f64 + 0.5) / d as f64;
        for y in 0..h {
            let yn = (y as f64 + 0.5) / h as f64;
            for x in 0..w {
                let xn = (x as f64 + 0.5) / w as f64;
                for (ci, p) in placed.iter().enumerate() {
                    if p.contains(zn, yn, xn) {
                        labels[(z * h + y) * w + x] = ci as u16 + 1;
                    }
                }
            }
        }
    }

    let means: Vec<f64> = kinds
        .iter()
        .map(|k| k.intensity() + rng.random_range(-0.08..0.08))
        .collect();
    let bg_mean = rng.random_range(0.05..0.25);
    let (fy, fx, phase) = (
        rng.random_range(0.5..1.5),
        rng.random_range(0.5..1.5),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let bias_amp = rng.random_range(0.08..0.18);
    let noise = Normal::new(0.0, 0.22).expect("valid sigma");
    let mut intensities = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            let yn = (y as f64 + 0.5) / h as f64;
            for x in 0..w {
                let xn = (x as f64 + 0.5) / w as f64;
                let l = labels[(z * h + y) * w + x] as usize;
                let base = if l == 0 {
                    bg_mean + 0.1 * (7.0 * xn + 5.0 * yn + z as f64).sin()
                } else {
                    means[l - 1]
                };
                let bias = 1.0 + bias_amp * (std::f64::consts::PI * (fy * yn + fx * xn) + phase).sin();
                intensities.push((base * bias + noise.sample(&mut rng)) as f32);
            }
        }
    }

    LabeledVolume::new(
        format!("synthetic_{seed:06}"),
        synthetic_class_names(num_classes),
        Volume::new(shape, intensities)?,
        Volume::new(shape, labels)?,
    )
}

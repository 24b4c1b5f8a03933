//! Desk-scale datasets: synthetic 2D densities, grayscale image directories,
//! and their out-of-distribution counterparts.
//!
//! Dataset constants (mode positions, noise scales, clamp boxes) live in the
//! registry ([`DatasetSpec::builtin`]), not at point of use.

use crate::error::{Error, Result};
use crate::num::{real, Real};
use ndarray::Array2;
use rand::Rng;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetId {
    Gauss8,
    TwoRings,
    Moons,
    Checkerboard,
    ImageDir,
}

impl DatasetId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gauss8" => Ok(DatasetId::Gauss8),
            "two_rings" => Ok(DatasetId::TwoRings),
            "moons" => Ok(DatasetId::Moons),
            "checkerboard" => Ok(DatasetId::Checkerboard),
            "image_dir" => Ok(DatasetId::ImageDir),
            other => Err(Error::Config(format!("unknown dataset id `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetId::Gauss8 => "gauss8",
            DatasetId::TwoRings => "two_rings",
            DatasetId::Moons => "moons",
            DatasetId::Checkerboard => "checkerboard",
            DatasetId::ImageDir => "image_dir",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OodKind {
    /// Uniform noise over the clamped domain.
    Uniform,
    /// The base density scaled ×1.5 radially about the origin.
    RadialScaled,
}

impl OodKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(OodKind::Uniform),
            "radial_x1p5" => Ok(OodKind::RadialScaled),
            other => Err(Error::Config(format!("unknown ood kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OodKind::Uniform => "uniform",
            OodKind::RadialScaled => "radial_x1p5",
        }
    }
}

/// Registry entry: everything the trainer and evaluator need to know about a
/// dataset.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub id: DatasetId,
    pub dim: usize,
    pub clamp: (f64, f64),
    /// Characteristic scale used to size augmentation jitter.
    pub data_scale: f64,
    pub ood: OodKind,
    pub image_dir: Option<PathBuf>,
}

/// gauss8 constants: 8 modes of σ = 0.1 on a circle of radius 2.
pub const GAUSS8_MODES: usize = 8;
pub const GAUSS8_RADIUS: f64 = 2.0;
pub const GAUSS8_SIGMA: f64 = 0.1;
const RINGS_RADII: (f64, f64) = (1.0, 2.0);
const RINGS_SIGMA: f64 = 0.05;
const MOONS_SCALE: f64 = 1.5;
const MOONS_SIGMA: f64 = 0.05;
const CHECKER_CELLS: usize = 4;
const CHECKER_SPAN: f64 = 3.0;

impl DatasetSpec {
    pub fn builtin(id: DatasetId) -> Self {
        match id {
            DatasetId::Gauss8 => Self {
                id,
                dim: 2,
                clamp: (-4.0, 4.0),
                data_scale: GAUSS8_RADIUS,
                ood: OodKind::Uniform,
                image_dir: None,
            },
            DatasetId::TwoRings => Self {
                id,
                dim: 2,
                clamp: (-4.0, 4.0),
                data_scale: RINGS_RADII.1,
                ood: OodKind::Uniform,
                image_dir: None,
            },
            DatasetId::Moons => Self {
                id,
                dim: 2,
                clamp: (-4.0, 4.0),
                data_scale: MOONS_SCALE,
                ood: OodKind::Uniform,
                image_dir: None,
            },
            DatasetId::Checkerboard => Self {
                id,
                dim: 2,
                clamp: (-4.0, 4.0),
                data_scale: CHECKER_SPAN,
                ood: OodKind::Uniform,
                image_dir: None,
            },
            DatasetId::ImageDir => Self {
                id,
                dim: 0, // set after loading
                clamp: (-1.0, 1.0),
                data_scale: 1.0,
                ood: OodKind::Uniform,
                image_dir: None,
            },
        }
    }

    /// Known generator mode centers (gauss8), used by the nearest-mode
    /// classifier in evaluation.
    pub fn mode_centers(&self) -> Option<Vec<[f64; 2]>> {
        match self.id {
            DatasetId::Gauss8 => Some(
                (0..GAUSS8_MODES)
                    .map(|k| {
                        let theta = 2.0 * PI * k as f64 / GAUSS8_MODES as f64;
                        [GAUSS8_RADIUS * theta.cos(), GAUSS8_RADIUS * theta.sin()]
                    })
                    .collect(),
            ),
            _ => None,
        }
    }
}

fn clamp_row<F: Real>(row: &mut [F], clamp: (f64, f64)) {
    let lo = real::<F>(clamp.0);
    let hi = real::<F>(clamp.1);
    for v in row {
        if *v < lo {
            *v = lo;
        }
        if *v > hi {
            *v = hi;
        }
    }
}

/// i.i.d. samples from the named density.
pub fn generate<F: Real>(spec: &DatasetSpec, n: usize, rng: &mut impl Rng) -> Result<Array2<F>> {
    if n == 0 {
        return Err(Error::Argument("need n ≥ 1 samples".into()));
    }
    let mut out = Array2::zeros((n, spec.dim.max(2)));
    match spec.id {
        DatasetId::Gauss8 => {
            for i in 0..n {
                let k = rng.random_range(0..GAUSS8_MODES);
                fill_gauss8_row(spec, k, out.row_mut(i).into_slice().unwrap(), rng);
            }
        }
        DatasetId::TwoRings => {
            for i in 0..n {
                let r0 = if rng.random_range(0.0..1.0) < 0.5 {
                    RINGS_RADII.0
                } else {
                    RINGS_RADII.1
                };
                let theta = rng.random_range(0.0..2.0 * PI);
                let r = r0 + crate::rng::normal::<f64>(rng) * RINGS_SIGMA;
                let row = out.row_mut(i).into_slice().unwrap();
                row[0] = real(r * theta.cos());
                row[1] = real(r * theta.sin());
                clamp_row(row, spec.clamp);
            }
        }
        DatasetId::Moons => {
            for i in 0..n {
                let t = rng.random_range(0.0..PI);
                let upper = rng.random_range(0.0..1.0) < 0.5;
                let (mut x, mut y) = if upper {
                    (t.cos() - 0.5, t.sin() - 0.25)
                } else {
                    (0.5 - t.cos(), 0.25 - t.sin())
                };
                x = MOONS_SCALE * (x + crate::rng::normal::<f64>(rng) * MOONS_SIGMA);
                y = MOONS_SCALE * (y + crate::rng::normal::<f64>(rng) * MOONS_SIGMA);
                let row = out.row_mut(i).into_slice().unwrap();
                row[0] = real(x);
                row[1] = real(y);
                clamp_row(row, spec.clamp);
            }
        }
        DatasetId::Checkerboard => {
            // cells (i, j) with even parity on a CHECKER_CELLS² grid over
            // [−span, span]²
            let cell = 2.0 * CHECKER_SPAN / CHECKER_CELLS as f64;
            for i in 0..n {
                let (ci, cj) = loop {
                    let ci = rng.random_range(0..CHECKER_CELLS);
                    let cj = rng.random_range(0..CHECKER_CELLS);
                    if (ci + cj) % 2 == 0 {
                        break (ci, cj);
                    }
                };
                let u = rng.random_range(0.0..1.0);
                let v = rng.random_range(0.0..1.0);
                let row = out.row_mut(i).into_slice().unwrap();
                row[0] = real(-CHECKER_SPAN + cell * (ci as f64 + u));
                row[1] = real(-CHECKER_SPAN + cell * (cj as f64 + v));
                clamp_row(row, spec.clamp);
            }
        }
        DatasetId::ImageDir => {
            return Err(Error::Config(
                "image datasets are loaded from a directory, not generated".into(),
            ));
        }
    }
    Ok(out)
}

fn fill_gauss8_row<F: Real>(spec: &DatasetSpec, mode: usize, row: &mut [F], rng: &mut impl Rng) {
    let theta = 2.0 * PI * mode as f64 / GAUSS8_MODES as f64;
    let cx = GAUSS8_RADIUS * theta.cos();
    let cy = GAUSS8_RADIUS * theta.sin();
    row[0] = real(cx + crate::rng::normal::<f64>(rng) * GAUSS8_SIGMA);
    row[1] = real(cy + crate::rng::normal::<f64>(rng) * GAUSS8_SIGMA);
    clamp_row(row, spec.clamp);
}

/// Samples drawn from one named gauss8 mode (reference sets for conditional
/// sampling).
pub fn generate_mode<F: Real>(
    spec: &DatasetSpec,
    mode: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Array2<F>> {
    if spec.id != DatasetId::Gauss8 {
        return Err(Error::Config("generate_mode is defined for gauss8".into()));
    }
    if mode >= GAUSS8_MODES {
        return Err(Error::Argument(format!("mode {mode} out of range 0..{GAUSS8_MODES}")));
    }
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        fill_gauss8_row(spec, mode, out.row_mut(i).into_slice().unwrap(), rng);
    }
    Ok(out)
}

/// The configured OOD counterpart set.
pub fn ood_counterpart<F: Real>(
    spec: &DatasetSpec,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Array2<F>> {
    if n == 0 {
        return Err(Error::Argument("need n ≥ 1 samples".into()));
    }
    match spec.ood {
        OodKind::Uniform => {
            let dim = spec.dim.max(2);
            let mut out = Array2::zeros((n, dim));
            for mut row in out.rows_mut() {
                for v in row.iter_mut() {
                    *v = crate::rng::uniform(rng, spec.clamp.0, spec.clamp.1);
                }
            }
            Ok(out)
        }
        OodKind::RadialScaled => {
            let mut base = generate::<F>(spec, n, rng)?;
            for mut row in base.rows_mut() {
                for v in row.iter_mut() {
                    *v = *v * real(1.5);
                }
                clamp_row(row.into_slice().unwrap(), spec.clamp);
            }
            Ok(base)
        }
    }
}

// ── images ──────────────────────────────────────────────────────────────

/// A directory of fixed-size grayscale PNGs, scaled to [−1, 1], ordered by
/// filename.
#[derive(Clone, Debug)]
pub struct ImageData<F: Real> {
    pub pixels: Array2<F>,
    pub h: usize,
    pub w: usize,
    pub files: Vec<String>,
}

pub fn load_images<F: Real>(dir: &Path) -> Result<ImageData<F>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data {
            path: dir.display().to_string(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|x| x.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Data {
            path: dir.display().to_string(),
            reason: "no .png files found".into(),
        });
    }
    let mut pixels: Option<Array2<F>> = None;
    let mut dims = (0usize, 0usize);
    let mut files = Vec::with_capacity(entries.len());
    for (idx, path) in entries.iter().enumerate() {
        let img = image::open(path)
            .map_err(|e| Error::Data {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if idx == 0 {
            dims = (h, w);
            pixels = Some(Array2::zeros((entries.len(), h * w)));
        } else if (h, w) != dims {
            return Err(Error::Data {
                path: path.display().to_string(),
                reason: format!("size {h}x{w} does not match first image {}x{}", dims.0, dims.1),
            });
        }
        let store = pixels.as_mut().expect("allocated");
        for (p, v) in store.row_mut(idx).iter_mut().zip(img.pixels()) {
            // {0, 255} map to {−1, 1}
            *p = real(v.0[0] as f64 / 255.0 * 2.0 - 1.0);
        }
        files.push(
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
    }
    Ok(ImageData {
        pixels: pixels.expect("nonempty"),
        h: dims.0,
        w: dims.1,
        files,
    })
}

/// Write one [−1, 1] row back to a grayscale PNG (inverse of the load
/// scaling).
pub fn save_image<F: Real>(row: &[F], h: usize, w: usize, path: &Path) -> Result<()> {
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (pix, v) in img.pixels_mut().zip(row.iter()) {
        let byte = ((v.as_f64() + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8;
        pix.0[0] = byte;
    }
    img.save(path).map_err(|e| Error::Data {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

// ── CSV export/import for 2D samples ────────────────────────────────────

/// Write samples as `x0,x1,...` rows with a header.
pub fn write_samples_csv<F: Real>(path: &Path, samples: &Array2<F>) -> Result<()> {
    let mut out = String::new();
    let cols = samples.ncols();
    let header: Vec<String> = (0..cols).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in samples.rows() {
        let vals: Vec<String> = row.iter().map(|v| format!("{}", v.as_f64())).collect();
        out.push_str(&vals.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue; // header
        }
        let vals: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        rows.push(vals.map_err(|e| Error::Data {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    if rows.is_empty() {
        return Err(Error::Data {
            path: path.display().to_string(),
            reason: "no data rows".into(),
        });
    }
    let cols = rows[0].len();
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::Data {
                path: path.display().to_string(),
                reason: format!("ragged row {i}"),
            });
        }
        for (j, v) in r.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};

    #[test]
    fn gauss8_mode_weights_match_multinomial_oracle() {
        let spec = DatasetSpec::builtin(DatasetId::Gauss8);
        let mut rng = stream(100, domain::DATA, 0, 0);
        let samples = generate::<f64>(&spec, 100_000, &mut rng).unwrap();
        let centers = spec.mode_centers().unwrap();
        let mut counts = [0usize; 8];
        for row in samples.rows() {
            let (mut best, mut bd) = (0, f64::INFINITY);
            for (k, c) in centers.iter().enumerate() {
                let d = (row[0] - c[0]).powi(2) + (row[1] - c[1]).powi(2);
                if d < bd {
                    bd = d;
                    best = k;
                }
            }
            counts[best] += 1;
        }
        for (k, c) in counts.iter().enumerate() {
            let w = *c as f64 / 100_000.0;
            assert!((w - 0.125).abs() < 0.01, "mode {k} weight {w}");
        }
    }

    #[test]
    fn samples_respect_clamp_and_seed_determinism() {
        for id in [
            DatasetId::Gauss8,
            DatasetId::TwoRings,
            DatasetId::Moons,
            DatasetId::Checkerboard,
        ] {
            let spec = DatasetSpec::builtin(id);
            let a = generate::<f64>(&spec, 500, &mut stream(7, domain::DATA, 0, 0)).unwrap();
            let b = generate::<f64>(&spec, 500, &mut stream(7, domain::DATA, 0, 0)).unwrap();
            assert_eq!(a, b, "{id:?} not deterministic");
            assert!(a
                .iter()
                .all(|v| *v >= spec.clamp.0 && *v <= spec.clamp.1 && v.is_finite()));
        }
    }

    #[test]
    fn uniform_ood_moments_and_mode_disjointness() {
        let spec = DatasetSpec::builtin(DatasetId::Gauss8);
        let mut rng = stream(8, domain::DATA, 1, 0);
        let n = 20_000;
        let ood = ood_counterpart::<f64>(&spec, n, &mut rng).unwrap();

        // per-coordinate mean at the domain center within 3σ/√n
        let width = spec.clamp.1 - spec.clamp.0;
        let sigma = width / 12f64.sqrt();
        let tol = 3.0 * sigma / (n as f64).sqrt();
        for j in 0..2 {
            let mean = ood.column(j).sum() / n as f64;
            assert!(mean.abs() < tol, "coordinate {j} mean {mean} vs tol {tol}");
        }

        // ≥95% of OOD points are beyond 3σ of every gauss8 mode
        let centers = spec.mode_centers().unwrap();
        let mut far = 0usize;
        for row in ood.rows() {
            let near = centers.iter().any(|c| {
                ((row[0] - c[0]).powi(2) + (row[1] - c[1]).powi(2)).sqrt() <= 3.0 * GAUSS8_SIGMA
            });
            if !near {
                far += 1;
            }
        }
        let frac = far as f64 / n as f64;
        assert!(frac >= 0.95, "only {frac} of OOD points beyond 3σ of modes");

        // determinism
        let a = ood_counterpart::<f64>(&spec, 100, &mut stream(9, domain::DATA, 2, 0)).unwrap();
        let b = ood_counterpart::<f64>(&spec, 100, &mut stream(9, domain::DATA, 2, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn image_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        // empty directory → data error
        assert!(matches!(
            load_images::<f64>(dir.path()),
            Err(Error::Data { .. })
        ));

        // write a couple of 8x8 grayscale images, reload, compare exactly
        let mut img = image::GrayImage::new(8, 8);
        for (i, p) in img.pixels_mut().enumerate() {
            p.0[0] = (i * 4 % 256) as u8;
        }
        img.save(dir.path().join("b.png")).unwrap();
        let mut img2 = image::GrayImage::new(8, 8);
        img2.put_pixel(0, 0, image::Luma([255]));
        img2.save(dir.path().join("a.png")).unwrap();

        let data = load_images::<f64>(dir.path()).unwrap();
        assert_eq!(data.files, vec!["a.png", "b.png"], "filename ordering");
        assert_eq!(data.pixels.dim(), (2, 64));
        // endpoints map exactly: 0 → −1, 255 → 1
        assert_eq!(data.pixels[[0, 0]], 1.0);
        assert_eq!(data.pixels[[0, 1]], -1.0);

        // save → load are value-exact
        let row: Vec<f64> = data.pixels.row(1).to_vec();
        save_image(&row, 8, 8, &dir.path().join("copy.png")).unwrap();
        let reload = load_images::<f64>(dir.path()).unwrap();
        let idx = reload.files.iter().position(|f| f == "copy.png").unwrap();
        for (a, b) in reload.pixels.row(idx).iter().zip(row.iter()) {
            assert_eq!(a, b);
        }

        // size mismatch names the offending file
        image::GrayImage::new(4, 4).save(dir.path().join("zz.png")).unwrap();
        match load_images::<f64>(dir.path()) {
            Err(Error::Data { path, .. }) => assert!(path.contains("zz.png")),
            other => panic!("expected size-mismatch error, got {other:?}"),
        }
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        let samples =
            Array2::from_shape_fn((5, 2), |(i, j)| (i as f64 + 1.0) * 0.5 - j as f64 * 0.25);
        write_samples_csv(&path, &samples).unwrap();
        let back = read_samples_csv(&path).unwrap();
        assert_eq!(samples, back);
    }

    #[test]
    fn train_and_heldout_streams_are_disjoint() {
        // distinct stream domains can never replay the same draws
        let spec = DatasetSpec::builtin(DatasetId::Gauss8);
        let train = generate::<f64>(&spec, 200, &mut stream(5, domain::DATA, 0, 0)).unwrap();
        let held = generate::<f64>(&spec, 200, &mut stream(5, domain::HELDOUT, 0, 0)).unwrap();
        assert_ne!(train, held);
    }
}

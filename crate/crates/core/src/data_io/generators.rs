//! Seeded synthetic datasets.
//!
//! All generators use ChaCha8 seeded from the caller's `u64`, so output is a pure
//! function of the sizes and the seed on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, FeatureMatrix};
use crate::error::{KlrError, Result};

pub const FIG1_N_TRAIN: usize = 3375;
pub const FIG1_N_TEST: usize = 625;

/// Half-width of the band around the curved boundary inside which labels are
/// assigned by a fair coin.
pub const FIG1_BAND_HALF_WIDTH: f64 = 0.04;

/// XOR parity of the 4x4 cell containing `(x, y)`.
pub fn checkerboard_label(x: f64, y: f64) -> usize {
    let cx = (4.0 * x).floor() as i64;
    let cy = (4.0 * y).floor() as i64;
    ((cx + cy).rem_euclid(2)) as usize
}

/// Points uniform on `[0,1]²`, labelled by [`checkerboard_label`].
pub fn generate_checkerboard(n_points: usize, seed: u64) -> Result<Dataset> {
    if n_points == 0 {
        return Err(KlrError::InvalidParameter("n_points must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n_points);
    let mut y = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        data.push(a);
        data.push(b);
        y.push(checkerboard_label(a, b));
    }
    binary_dataset(FeatureMatrix::new(n_points, 2, data)?, y, "checkerboard")
}

/// Decision curve of the two-moon-like problem: `0.5 + 0.2·sin(2πx)`.
pub fn fig1_boundary(x: f64) -> f64 {
    0.5 + 0.2 * (2.0 * std::f64::consts::PI * x).sin()
}

/// Noise-free label: 1 above the curve, 0 below.
pub fn fig1_label(x: f64, y: f64) -> usize {
    usize::from(y > fig1_boundary(x))
}

/// Two-class problem with a smooth sinusoidal boundary on `[0,1]²`.
///
/// Points are uniform on the unit square. Outside a vertical band of half-width
/// [`FIG1_BAND_HALF_WIDTH`] around `y = fig1_boundary(x)` the label is
/// [`fig1_label`]; inside the band it is a fair coin flip. The band covers about 8%
/// of the square, which caps the attainable accuracy near 0.96. The training set is
/// drawn first, then the test set, from one stream.
pub fn generate_fig1_synthetic(n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(KlrError::InvalidParameter("sizes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Result<Dataset> {
        let mut data = Vec::with_capacity(2 * n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            let coin: bool = rng.random();
            let label = if (b - fig1_boundary(a)).abs() < FIG1_BAND_HALF_WIDTH {
                usize::from(coin)
            } else {
                fig1_label(a, b)
            };
            data.push(a);
            data.push(b);
            y.push(label);
        }
        binary_dataset(FeatureMatrix::new(n, 2, data)?, y, "fig1-synthetic")
    };
    let train = draw(n_train)?;
    let test = draw(n_test)?;
    Ok((train, test))
}

/// Isotropic Gaussian blobs in 2-D, one per class, centred on a circle of radius
/// 0.35 around `(0.5, 0.5)` with standard deviation 0.05. Class `i` is sample
/// `i mod classes`, so class sizes differ by at most one.
pub fn generate_blobs(n_points: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n_points == 0 || classes < 2 {
        return Err(KlrError::InvalidParameter(
            "blobs need at least one point and two classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let mut data = Vec::with_capacity(2 * n_points);
    let mut y = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let c = i % classes;
        let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        data.push(0.5 + 0.35 * angle.cos() + noise.sample(&mut rng));
        data.push(0.5 + 0.35 * angle.sin() + noise.sample(&mut rng));
        y.push(c);
    }
    Dataset::with_class_indices(FeatureMatrix::new(n_points, 2, data)?, y, "blobs")
}

fn binary_dataset(x: FeatureMatrix, y: Vec<usize>, source: &str) -> Result<Dataset> {
    Dataset::new(
        x,
        y,
        super::DatasetMeta {
            source: source.to_string(),
            label_values: vec![0.0, 1.0],
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_parity() {
        assert_eq!(checkerboard_label(0.1, 0.1), 0);
        assert_eq!(checkerboard_label(0.3, 0.1), 1);
        assert_eq!(checkerboard_label(0.3, 0.3), 0);
        assert_eq!(checkerboard_label(0.99, 0.01), 1);
    }

    #[test]
    fn checkerboard_balance_and_labels() {
        let ds = generate_checkerboard(100_000, 11).unwrap();
        let ones = ds.y().iter().filter(|&&c| c == 1).count() as f64 / 1e5;
        assert!((ones - 0.5).abs() <= 0.01, "fraction {ones}");
        for i in 0..ds.n() {
            let r = ds.x().row(i);
            assert!(r.iter().all(|v| (0.0..1.0).contains(v)));
            assert_eq!(ds.y()[i], checkerboard_label(r[0], r[1]));
        }
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(generate_checkerboard(500, 3).unwrap(), generate_checkerboard(500, 3).unwrap());
        assert_ne!(generate_checkerboard(500, 3).unwrap(), generate_checkerboard(500, 4).unwrap());
        let a = generate_fig1_synthetic(FIG1_N_TRAIN, FIG1_N_TEST, 5).unwrap();
        let b = generate_fig1_synthetic(FIG1_N_TRAIN, FIG1_N_TEST, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.n(), 3375);
        assert_eq!(a.1.n(), 625);
        assert_eq!(generate_blobs(90, 3, 1).unwrap(), generate_blobs(90, 3, 1).unwrap());
    }

    #[test]
    fn fig1_noise_confined_to_band() {
        let (train, _) = generate_fig1_synthetic(20_000, 1, 9).unwrap();
        let mut in_band = 0usize;
        for i in 0..train.n() {
            let r = train.x().row(i);
            if (r[1] - fig1_boundary(r[0])).abs() < FIG1_BAND_HALF_WIDTH {
                in_band += 1;
            } else {
                assert_eq!(train.y()[i], fig1_label(r[0], r[1]));
            }
        }
        let frac = in_band as f64 / train.n() as f64;
        assert!((frac - 2.0 * FIG1_BAND_HALF_WIDTH).abs() < 0.01, "band fraction {frac}");
    }

    #[test]
    fn blobs_shape() {
        let ds = generate_blobs(30, 3, 2).unwrap();
        assert_eq!(ds.n_classes(), 3);
        assert_eq!(ds.y().iter().filter(|&&c| c == 2).count(), 10);
        assert!(generate_blobs(10, 1, 0).is_err());
        assert!(generate_checkerboard(0, 0).is_err());
    }
}

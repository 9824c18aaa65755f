use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{GradientSet, ModelParams};

/// Scales each example's gradient (flattened over all layers) by
/// `min(1, clip / ||g||)`. Gradients already within the bound are returned
/// untouched. Also returns the pre-clipping norms.
pub fn clip_per_sample(grads: &[GradientSet], clip: f64) -> Result<(Vec<GradientSet>, Vec<f64>)> {
    if !(clip > 0.0) {
        return Err(Error::Config(format!("clip norm {clip} must be positive")));
    }
    let mut clipped = Vec::with_capacity(grads.len());
    let mut norms = Vec::with_capacity(grads.len());
    for (i, g) in grads.iter().enumerate() {
        let norm = g.l2_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("per-example gradient {i}")));
        }
        if norm > clip {
            let factor = clip / norm;
            clipped.push(g.map_values(|v| v * factor));
        } else {
            clipped.push(g.clone());
        }
        norms.push(norm);
    }
    Ok((clipped, norms))
}

/// `(Σ clipped + N(0, σ²C²I)) / expected_batch`, with Gaussian draws from `noise_seed`.
/// An empty list yields pure noise (or zero when σ = 0).
pub fn noisy_aggregate(
    clipped: &[GradientSet],
    like: &ModelParams,
    clip: f64,
    sigma: f64,
    expected_batch: f64,
    noise_seed: u64,
) -> Result<GradientSet> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!(
            "noise multiplier {sigma} must be non-negative"
        )));
    }
    if !(expected_batch > 0.0) {
        return Err(Error::Config(format!(
            "expected batch size {expected_batch} must be positive"
        )));
    }
    let mut sum = like.zeros_like();
    for g in clipped {
        if !g.same_shape(like) {
            return Err(Error::Shape(
                "clipped gradient does not match model shape".into(),
            ));
        }
        sum.add_assign(g);
    }
    if sigma > 0.0 {
        let std = sigma * clip;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for v in sum.values_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += std * z;
        }
    }
    for v in sum.values_mut() {
        *v /= expected_batch;
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec2(a: f64, b: f64) -> GradientSet {
        let mut g = ModelParams::zeros(&[2, 1]);
        g.layers[0].weights.as_mut_slice().copy_from_slice(&[a, b]);
        g
    }

    fn flat(g: &GradientSet) -> Vec<f64> {
        g.values().collect()
    }

    #[test]
    fn clip_examples() {
        let (c, n) = clip_per_sample(&[vec2(3.0, 4.0)], 1.0).unwrap();
        assert_eq!(n, vec![5.0]);
        let v = flat(&c[0]);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);

        let small = vec2(3.0f64.sqrt(), 6.0f64.sqrt());
        let (c, _) = clip_per_sample(std::slice::from_ref(&small), 5.0).unwrap();
        assert_eq!(c[0], small);

        let (c, n) = clip_per_sample(&[vec2(0.0, 0.0)], 1.0).unwrap();
        assert_eq!(flat(&c[0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(n, vec![0.0]);

        assert!(clip_per_sample(&[vec2(f64::NAN, 0.0)], 1.0).is_err());
        assert!(clip_per_sample(&[], 0.0).is_err());
    }

    #[test]
    fn no_noise_is_mean_over_expected_batch() {
        let like = ModelParams::zeros(&[2, 1]);
        let g =
            noisy_aggregate(&[vec2(1.0, 2.0), vec2(3.0, 4.0)], &like, 1.0, 0.0, 4.0, 0).unwrap();
        assert_eq!(flat(&g), vec![1.0, 1.5, 0.0]);
        let empty = noisy_aggregate(&[], &like, 1.0, 0.0, 4.0, 0).unwrap();
        assert_eq!(flat(&empty), vec![0.0; 3]);
        let noise_only = noisy_aggregate(&[], &like, 1.0, 1.0, 4.0, 0).unwrap();
        assert!(flat(&noise_only).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn noise_is_seeded() {
        let like = ModelParams::zeros(&[3, 2, 1]);
        let a = noisy_aggregate(&[], &like, 2.0, 1.5, 10.0, 42).unwrap();
        let b = noisy_aggregate(&[], &like, 2.0, 1.5, 10.0, 42).unwrap();
        let c = noisy_aggregate(&[], &like, 2.0, 1.5, 10.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
